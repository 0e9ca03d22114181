/** Deterministic toy-model fixtures for the capture tests. */

import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { ModelConfig } from "../src/model.js";
import { Container, Tensor, writeContainer } from "../src/safetensors.js";

export const TEST_CONFIG: ModelConfig = {
  n_layer: 2,
  d_model: 32,
  n_head: 2,
  vocab_size: 256,
  max_seq: 64,
};

/** mulberry32 + Box-Muller: reproducible standard normals. */
export function normalSource(seed: number): () => number {
  let state = seed >>> 0;
  const uniform = () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return (((t ^ (t >>> 14)) >>> 0) + 0.5) / 4294967296;
  };
  return () => {
    const u = uniform();
    const v = uniform();
    return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
  };
}

function randomTensor(shape: number[], next: () => number, scale: number): Tensor {
  const count = shape.reduce((a, b) => a * b, 1);
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) data[i] = Math.fround(next() * scale);
  return { shape, data };
}

function onesTensor(shape: number[]): Tensor {
  const count = shape.reduce((a, b) => a * b, 1);
  return { shape, data: new Float32Array(count).fill(1) };
}

function zerosTensor(shape: number[]): Tensor {
  const count = shape.reduce((a, b) => a * b, 1);
  return { shape, data: new Float32Array(count) };
}

export function generateWeights(config: ModelConfig, seed: number): Map<string, Tensor> {
  const next = normalSource(seed);
  const d = config.d_model;
  const scale = 1 / Math.sqrt(d);
  const tensors = new Map<string, Tensor>();
  tensors.set("embed.weight", randomTensor([config.vocab_size, d], next, 1));
  tensors.set("embed.pos.weight", randomTensor([config.max_seq, d], next, 0.1));
  for (let i = 0; i < config.n_layer; i++) {
    tensors.set(`blocks.${i}.ln1.weight`, onesTensor([d]));
    tensors.set(`blocks.${i}.ln1.bias`, zerosTensor([d]));
    tensors.set(`blocks.${i}.ln2.weight`, onesTensor([d]));
    tensors.set(`blocks.${i}.ln2.bias`, zerosTensor([d]));
    for (const proj of ["q", "k", "v", "o"]) {
      tensors.set(`blocks.${i}.attn.${proj}.weight`, randomTensor([d, d], next, scale));
    }
    tensors.set(`blocks.${i}.mlp.fc.weight`, randomTensor([d, 4 * d], next, scale));
    tensors.set(`blocks.${i}.mlp.proj.weight`, randomTensor([4 * d, d], next, 1 / Math.sqrt(4 * d)));
  }
  tensors.set("norm.weight", onesTensor([d]));
  tensors.set("norm.bias", zerosTensor([d]));
  tensors.set("lm_head.weight", randomTensor([d, config.vocab_size], next, scale));
  return tensors;
}

export function perturbWeights(
  weights: Map<string, Tensor>, seed: number, scale: number,
): Map<string, Tensor> {
  const next = normalSource(seed);
  const out = new Map<string, Tensor>();
  for (const [name, t] of weights) {
    const data = new Float32Array(t.data.length);
    for (let i = 0; i < data.length; i++) {
      data[i] = Math.fround(t.data[i] + next() * scale);
    }
    out.set(name, { shape: [...t.shape], data });
  }
  return out;
}

export function writeModelDir(
  dir: string, config: ModelConfig, weights: Map<string, Tensor>,
): void {
  mkdirSync(dir, { recursive: true });
  writeFileSync(join(dir, "config.json"), JSON.stringify(config, null, 2));
  const container: Container = { tensors: weights, metadata: {} };
  writeContainer(join(dir, "model.safetensors"), container);
}

export const CALIB_TEXTS = [
  "The quick brown fox jumps over the lazy dog near the river bank.",
  "Counting from one to ten takes longer when every number is spelled out.",
  "A short proof is not always a correct proof, so check every step twice.",
].join("\n");
