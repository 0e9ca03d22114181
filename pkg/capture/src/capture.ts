/** Capture per-layer activations from a transformer checkpoint over a
 * calibration text file, emitting the merge toolkit's trace container.
 *
 * Pieces are the non-empty lines of the calibration file, tokenized at
 * byte level and truncated to maxPositions.  The calibration id is a pure
 * function of the token sequences, so traces captured from different
 * models over the same texts pair correctly downstream.
 */

import { readFileSync } from "node:fs";

import { ConfigurationError } from "./errors.js";
import { forwardWithTaps, loadModel, tapNames } from "./model.js";
import { Container, contentHashOfFile, Tensor, writeContainer } from "./safetensors.js";
import { calibIdOf, readCalibTexts, tokenize } from "./tokenizer.js";

export interface HookConfig {
  modelPath: string;
  layerSelector: string[];
  calibTexts: string;
  maxPositions: number;
  outputPath: string;
  poolMode: "none" | "mean-over-positions";
}

export function matchLayers(selectors: string[], available: string[]): string[] {
  const regexes = selectors.map(
    (s) => new RegExp(`^${s.split("*").map(escapeRegex).join(".*")}$`),
  );
  const matched = available.filter((name) => regexes.some((r) => r.test(name)));
  if (matched.length === 0) {
    throw new ConfigurationError(
      `layer selector [${selectors.join(", ")}] matches none of: ${available.join(", ")}`,
    );
  }
  return matched; // network order, inherited from `available`
}

function escapeRegex(s: string): string {
  return s.replace(/[.*+?^${}()|[\]\\]/g, "\\$&");
}

function meanOverPositions(t: Tensor): Tensor {
  const [n, width] = t.shape;
  const out = new Float32Array(width);
  for (let j = 0; j < width; j++) {
    let acc = 0;
    for (let i = 0; i < n; i++) acc += t.data[i * width + j];
    out[j] = Math.fround(acc / n);
  }
  return { shape: [1, width], data: out };
}

export function runCapture(config: HookConfig): { layers: string[]; pieces: number } {
  if (config.maxPositions < 1) {
    throw new ConfigurationError(`max positions must be >= 1, got ${config.maxPositions}`);
  }
  const model = loadModel(config.modelPath);
  const layers = matchLayers(config.layerSelector, tapNames(model.config));
  const texts = readCalibTexts(readFileSync(config.calibTexts, "utf-8"));
  if (texts.length === 0) {
    throw new ConfigurationError(`${config.calibTexts}: no non-empty calibration lines`);
  }
  const maxPositions = Math.min(config.maxPositions, model.config.max_seq);
  const sequences = texts.map((t) => tokenize(t, maxPositions));

  const tensors = new Map<string, Tensor>();
  sequences.forEach((ids, piece) => {
    const taps = forwardWithTaps(model, ids);
    for (const layer of layers) {
      let tap = taps.get(layer)!;
      if (config.poolMode === "mean-over-positions") {
        tap = meanOverPositions(tap);
      }
      tensors.set(`act.${layer}.piece.${piece}`, tap);
    }
  });

  const container: Container = {
    tensors,
    metadata: {
      kind: "activation-trace",
      model_id: contentHashOfFile(model.checkpointPath),
      calib_id: calibIdOf(sequences),
      layers: JSON.stringify(layers),
      pieces: String(sequences.length),
    },
  };
  writeContainer(config.outputPath, container);
  return { layers, pieces: sequences.length };
}
