/** A small GPT-style decoder implemented directly on typed arrays, enough
 * to run real forward passes over checkpoints at desk scale.  The forward
 * pass exposes taps at module outputs: "embed", each "blocks.{i}"
 * (post-residual), "norm" and "lm_head".
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";

import { ConfigurationError, FormatError } from "./errors.js";
import { Container, readContainer, Tensor } from "./safetensors.js";

export interface ModelConfig {
  n_layer: number;
  d_model: number;
  n_head: number;
  vocab_size: number;
  max_seq: number;
  ln_eps?: number;
}

export interface LoadedModel {
  config: ModelConfig;
  weights: Container;
  checkpointPath: string;
}

export function loadModel(modelDir: string): LoadedModel {
  const configPath = join(modelDir, "config.json");
  const raw = readFileSync(configPath, "utf-8"); // ENOENT propagates as I/O
  let config: ModelConfig;
  try {
    config = JSON.parse(raw);
  } catch (e) {
    throw new FormatError(`${configPath}: malformed model config: ${e}`);
  }
  for (const field of ["n_layer", "d_model", "n_head", "vocab_size", "max_seq"] as const) {
    if (!Number.isInteger(config[field]) || config[field] < 1) {
      throw new FormatError(`${configPath}: bad or missing field ${field}`);
    }
  }
  if (config.d_model % config.n_head !== 0) {
    throw new FormatError(`${configPath}: d_model must be divisible by n_head`);
  }
  const checkpointPath = join(modelDir, "model.safetensors");
  const weights = readContainer(checkpointPath);
  validateWeights(config, weights, checkpointPath);
  return { config, weights, checkpointPath };
}

function expectShape(w: Container, name: string, shape: number[], path: string): Tensor {
  const t = w.tensors.get(name);
  if (!t) throw new FormatError(`${path}: missing tensor ${name}`);
  if (t.shape.length !== shape.length || t.shape.some((d, i) => d !== shape[i])) {
    throw new FormatError(
      `${path}: tensor ${name} has shape [${t.shape}], expected [${shape}]`,
    );
  }
  return t;
}

function validateWeights(c: ModelConfig, w: Container, path: string): void {
  const d = c.d_model;
  expectShape(w, "embed.weight", [c.vocab_size, d], path);
  expectShape(w, "embed.pos.weight", [c.max_seq, d], path);
  for (let i = 0; i < c.n_layer; i++) {
    for (const ln of [`blocks.${i}.ln1`, `blocks.${i}.ln2`]) {
      expectShape(w, `${ln}.weight`, [d], path);
      expectShape(w, `${ln}.bias`, [d], path);
    }
    for (const proj of ["q", "k", "v", "o"]) {
      expectShape(w, `blocks.${i}.attn.${proj}.weight`, [d, d], path);
    }
    expectShape(w, `blocks.${i}.mlp.fc.weight`, [d, 4 * d], path);
    expectShape(w, `blocks.${i}.mlp.proj.weight`, [4 * d, d], path);
  }
  expectShape(w, "norm.weight", [d], path);
  expectShape(w, "norm.bias", [d], path);
  expectShape(w, "lm_head.weight", [d, c.vocab_size], path);
}

export function tapNames(config: ModelConfig): string[] {
  const names = ["embed"];
  for (let i = 0; i < config.n_layer; i++) names.push(`blocks.${i}`);
  names.push("norm", "lm_head");
  return names;
}

/** x[n,k] @ w[k,m] with f64 accumulation, rounded to f32 on store. */
function matmul(x: Float32Array, n: number, k: number, w: Tensor, m: number): Float32Array {
  const out = new Float32Array(n * m);
  const wd = w.data;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < m; j++) {
      let acc = 0;
      for (let p = 0; p < k; p++) acc += x[i * k + p] * wd[p * m + j];
      out[i * m + j] = Math.fround(acc);
    }
  }
  return out;
}

function layerNorm(
  x: Float32Array, n: number, d: number, weight: Tensor, bias: Tensor, eps: number,
): Float32Array {
  const out = new Float32Array(n * d);
  for (let i = 0; i < n; i++) {
    let mean = 0;
    for (let j = 0; j < d; j++) mean += x[i * d + j];
    mean /= d;
    let variance = 0;
    for (let j = 0; j < d; j++) {
      const delta = x[i * d + j] - mean;
      variance += delta * delta;
    }
    variance /= d;
    const inv = 1 / Math.sqrt(variance + eps);
    for (let j = 0; j < d; j++) {
      out[i * d + j] = Math.fround(
        (x[i * d + j] - mean) * inv * weight.data[j] + bias.data[j],
      );
    }
  }
  return out;
}

function addInto(target: Float32Array, other: Float32Array): void {
  for (let i = 0; i < target.length; i++) {
    target[i] = Math.fround(target[i] + other[i]);
  }
}

const GELU_C = Math.sqrt(2 / Math.PI);

function gelu(x: Float32Array): Float32Array {
  const out = new Float32Array(x.length);
  for (let i = 0; i < x.length; i++) {
    const v = x[i];
    out[i] = Math.fround(0.5 * v * (1 + Math.tanh(GELU_C * (v + 0.044715 * v * v * v))));
  }
  return out;
}

function causalAttention(
  x: Float32Array, n: number, config: ModelConfig, w: Container, block: number,
): Float32Array {
  const d = config.d_model;
  const heads = config.n_head;
  const hd = d / heads;
  const scale = 1 / Math.sqrt(hd);
  const q = matmul(x, n, d, w.tensors.get(`blocks.${block}.attn.q.weight`)!, d);
  const k = matmul(x, n, d, w.tensors.get(`blocks.${block}.attn.k.weight`)!, d);
  const v = matmul(x, n, d, w.tensors.get(`blocks.${block}.attn.v.weight`)!, d);

  const ctx = new Float32Array(n * d);
  const scores = new Float64Array(n);
  for (let h = 0; h < heads; h++) {
    const base = h * hd;
    for (let i = 0; i < n; i++) {
      let max = -Infinity;
      for (let j = 0; j <= i; j++) {
        let dot = 0;
        for (let p = 0; p < hd; p++) {
          dot += q[i * d + base + p] * k[j * d + base + p];
        }
        scores[j] = dot * scale;
        if (scores[j] > max) max = scores[j];
      }
      let total = 0;
      for (let j = 0; j <= i; j++) {
        scores[j] = Math.exp(scores[j] - max);
        total += scores[j];
      }
      for (let p = 0; p < hd; p++) {
        let acc = 0;
        for (let j = 0; j <= i; j++) {
          acc += (scores[j] / total) * v[j * d + base + p];
        }
        ctx[i * d + base + p] = Math.fround(acc);
      }
    }
  }
  return matmul(ctx, n, d, w.tensors.get(`blocks.${block}.attn.o.weight`)!, d);
}

/** Forward one token sequence, returning every tap keyed by module name.
 * Tap tensors are [positions x width] (width = vocab for "lm_head"). */
export function forwardWithTaps(
  model: LoadedModel, ids: Uint16Array,
): Map<string, Tensor> {
  const { config, weights } = model;
  const d = config.d_model;
  const n = ids.length;
  if (n === 0) throw new ConfigurationError("empty token sequence");
  if (n > config.max_seq) {
    throw new ConfigurationError(
      `sequence of ${n} tokens exceeds max_seq ${config.max_seq}; lower --max-positions`,
    );
  }
  const eps = config.ln_eps ?? 1e-5;
  const embed = weights.tensors.get("embed.weight")!;
  const pos = weights.tensors.get("embed.pos.weight")!;

  const taps = new Map<string, Tensor>();
  let x = new Float32Array(n * d);
  for (let i = 0; i < n; i++) {
    const id = ids[i];
    if (id >= config.vocab_size) {
      throw new ConfigurationError(
        `token id ${id} outside vocab of ${config.vocab_size}`,
      );
    }
    for (let j = 0; j < d; j++) {
      x[i * d + j] = Math.fround(embed.data[id * d + j] + pos.data[i * d + j]);
    }
  }
  taps.set("embed", { shape: [n, d], data: x.slice() });

  for (let b = 0; b < config.n_layer; b++) {
    const ln1 = layerNorm(
      x, n, d,
      weights.tensors.get(`blocks.${b}.ln1.weight`)!,
      weights.tensors.get(`blocks.${b}.ln1.bias`)!, eps,
    );
    addInto(x, causalAttention(ln1, n, config, weights, b));
    const ln2 = layerNorm(
      x, n, d,
      weights.tensors.get(`blocks.${b}.ln2.weight`)!,
      weights.tensors.get(`blocks.${b}.ln2.bias`)!, eps,
    );
    const hidden = gelu(matmul(ln2, n, d, weights.tensors.get(`blocks.${b}.mlp.fc.weight`)!, 4 * d));
    addInto(x, matmul(hidden, n, 4 * d, weights.tensors.get(`blocks.${b}.mlp.proj.weight`)!, d));
    taps.set(`blocks.${b}`, { shape: [n, d], data: x.slice() });
  }

  const normed = layerNorm(
    x, n, d, weights.tensors.get("norm.weight")!, weights.tensors.get("norm.bias")!, eps,
  );
  taps.set("norm", { shape: [n, d], data: normed });
  const logits = matmul(normed, n, d, weights.tensors.get("lm_head.weight")!, config.vocab_size);
  taps.set("lm_head", { shape: [n, config.vocab_size], data: logits });
  return taps;
}
