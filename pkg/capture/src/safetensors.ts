/** Named-tensor container I/O (safetensors layout), the wire format shared
 * with the merge toolkit: an 8-byte little-endian header length, a JSON
 * header of { name: { dtype, shape, data_offsets } } plus an optional
 * "__metadata__" string map, then the raw little-endian payload.
 *
 * Reads accept F32, F64 and BF16 (widened exactly to F32); traces are
 * always written as F32.
 */

import { createHash } from "node:crypto";
import { readFileSync, renameSync, writeFileSync } from "node:fs";
import { join, dirname } from "node:path";
import { tmpdir } from "node:os";

import { FormatError } from "./errors.js";

export interface Tensor {
  shape: number[];
  data: Float32Array;
}

export interface Container {
  tensors: Map<string, Tensor>;
  metadata: Record<string, string>;
}

interface HeaderEntry {
  dtype: string;
  shape: number[];
  data_offsets: [number, number];
}

const DTYPE_BYTES: Record<string, number> = { F32: 4, F64: 8, BF16: 2 };

function widenBF16(raw: Uint8Array, count: number, offset: number): Float32Array {
  const out = new Float32Array(count);
  const view = new DataView(raw.buffer, raw.byteOffset + offset, count * 2);
  const scratch = new DataView(new ArrayBuffer(4));
  for (let i = 0; i < count; i++) {
    scratch.setUint32(0, view.getUint16(i * 2, true) << 16, true);
    out[i] = scratch.getFloat32(0, true);
  }
  return out;
}

export function readContainer(path: string): Container {
  const blob = readFileSync(path);
  if (blob.length < 8) {
    throw new FormatError(`${path}: file too short for container header`);
  }
  const headerLen = Number(blob.readBigUInt64LE(0));
  if (headerLen <= 0 || 8 + headerLen > blob.length) {
    throw new FormatError(`${path}: implausible header length ${headerLen}`);
  }
  let header: Record<string, unknown>;
  try {
    header = JSON.parse(blob.subarray(8, 8 + headerLen).toString("utf-8"));
  } catch (e) {
    throw new FormatError(`${path}: malformed container header: ${e}`);
  }
  const payload = blob.subarray(8 + headerLen);
  const metadata = (header.__metadata__ ?? {}) as Record<string, string>;
  delete header.__metadata__;

  const tensors = new Map<string, Tensor>();
  for (const [name, entryRaw] of Object.entries(header)) {
    const entry = entryRaw as HeaderEntry;
    const width = DTYPE_BYTES[entry.dtype];
    if (width === undefined) {
      throw new FormatError(`${path}: tensor ${name} has unsupported dtype ${entry.dtype}`);
    }
    const count = entry.shape.reduce((a, b) => a * b, 1);
    const [begin, end] = entry.data_offsets;
    if (end - begin !== count * width || end > payload.length) {
      throw new FormatError(`${path}: tensor ${name} span does not match payload`);
    }
    let data: Float32Array;
    if (entry.dtype === "F32") {
      data = new Float32Array(count);
      const view = new DataView(payload.buffer, payload.byteOffset + begin, count * 4);
      for (let i = 0; i < count; i++) data[i] = view.getFloat32(i * 4, true);
    } else if (entry.dtype === "F64") {
      data = new Float32Array(count);
      const view = new DataView(payload.buffer, payload.byteOffset + begin, count * 8);
      for (let i = 0; i < count; i++) data[i] = Math.fround(view.getFloat64(i * 8, true));
    } else {
      data = widenBF16(payload, count, begin);
    }
    tensors.set(name, { shape: entry.shape, data });
  }
  return { tensors, metadata };
}

/** Write a container with F32 tensors, canonically: lexicographic name
 * order, contiguous payload, header padded to 8 bytes, temp+rename. */
export function writeContainer(path: string, container: Container): void {
  const names = [...container.tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  if (Object.keys(container.metadata).length > 0) {
    header.__metadata__ = Object.fromEntries(
      Object.entries(container.metadata).sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0)),
    );
  }
  let offset = 0;
  for (const name of names) {
    const t = container.tensors.get(name)!;
    const nbytes = t.data.length * 4;
    header[name] = { dtype: "F32", shape: t.shape, data_offsets: [offset, offset + nbytes] };
    offset += nbytes;
  }
  let headerJson = JSON.stringify(header);
  const pad = headerJson.length % 8 === 0 ? 0 : 8 - (headerJson.length % 8);
  headerJson += " ".repeat(pad);

  const out = Buffer.alloc(8 + headerJson.length + offset);
  out.writeBigUInt64LE(BigInt(headerJson.length), 0);
  out.write(headerJson, 8, "utf-8");
  let cursor = 8 + headerJson.length;
  for (const name of names) {
    const t = container.tensors.get(name)!;
    for (let i = 0; i < t.data.length; i++) {
      out.writeFloatLE(t.data[i], cursor + i * 4);
    }
    cursor += t.data.length * 4;
  }
  const tmp = join(dirname(path) || tmpdir(), `.capture-${process.pid}-${Date.now()}.tmp`);
  writeFileSync(tmp, out);
  renameSync(tmp, path);
}

/** Content hash over names, dtypes, shapes and payload bytes, matching the
 * merge toolkit's canonical scheme so traces carry comparable model ids. */
export function contentHashOfFile(path: string): string {
  const blob = readFileSync(path);
  const headerLen = Number(blob.readBigUInt64LE(0));
  const header = JSON.parse(blob.subarray(8, 8 + headerLen).toString("utf-8")) as Record<
    string,
    HeaderEntry
  >;
  delete (header as Record<string, unknown>).__metadata__;
  const payload = blob.subarray(8 + headerLen);

  const hash = createHash("sha256");
  for (const name of Object.keys(header).sort()) {
    const entry = header[name];
    const nameBytes = Buffer.from(name, "utf-8");
    const lenBuf = Buffer.alloc(4);
    lenBuf.writeUInt32LE(nameBytes.length, 0);
    hash.update(lenBuf);
    hash.update(nameBytes);
    hash.update(Buffer.from(entry.dtype, "ascii"));
    const rankBuf = Buffer.alloc(4);
    rankBuf.writeUInt32LE(entry.shape.length, 0);
    hash.update(rankBuf);
    const dimsBuf = Buffer.alloc(8 * entry.shape.length);
    entry.shape.forEach((d, i) => dimsBuf.writeBigUInt64LE(BigInt(d), i * 8));
    hash.update(dimsBuf);
    hash.update(payload.subarray(entry.data_offsets[0], entry.data_offsets[1]));
  }
  return `sha256:${hash.digest("hex")}`;
}
