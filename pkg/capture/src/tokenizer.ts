/** Byte-level tokenization of calibration texts.
 *
 * Token ids are raw UTF-8 bytes (vocab 256), truncated to maxPositions.
 * The calibration id hashes the token id sequences and nothing else, so
 * two capture runs over the same texts pair correctly regardless of which
 * model produced the activations.
 */

import { createHash } from "node:crypto";

export function tokenize(text: string, maxPositions: number): Uint16Array {
  const bytes = Buffer.from(text, "utf-8");
  const n = Math.min(bytes.length, maxPositions);
  const ids = new Uint16Array(n);
  for (let i = 0; i < n; i++) ids[i] = bytes[i];
  return ids;
}

export function calibIdOf(sequences: Uint16Array[]): string {
  const hash = createHash("sha256");
  for (const seq of sequences) {
    const lenBuf = Buffer.alloc(4);
    lenBuf.writeUInt32LE(seq.length, 0);
    hash.update(lenBuf);
    const buf = Buffer.alloc(seq.length * 2);
    seq.forEach((id, i) => buf.writeUInt16LE(id, i * 2));
    hash.update(buf);
  }
  return `sha256:tokens:${hash.digest("hex")}`;
}

/** Split a calibration file into pieces: one per non-empty line. */
export function readCalibTexts(content: string): string[] {
  const pieces = content
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
  return pieces;
}
