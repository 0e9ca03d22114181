import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";

import { beforeAll, describe, expect, it } from "vitest";

import { matchLayers, runCapture } from "../src/capture.js";
import { ConfigurationError } from "../src/errors.js";
import { readContainer } from "../src/safetensors.js";
import {
  CALIB_TEXTS,
  TEST_CONFIG,
  generateWeights,
  perturbWeights,
  writeModelDir,
} from "./helpers.js";

const CLI_PATH = fileURLToPath(new URL("../dist/cli.js", import.meta.url));

let root: string;
let ptDir: string;
let ftDir: string;
let calibPath: string;

beforeAll(() => {
  root = mkdtempSync(join(tmpdir(), "capture-e2e-"));
  ptDir = join(root, "pt");
  ftDir = join(root, "ft");
  const ptWeights = generateWeights(TEST_CONFIG, 1234);
  writeModelDir(ptDir, TEST_CONFIG, ptWeights);
  writeModelDir(ftDir, TEST_CONFIG, perturbWeights(ptWeights, 99, 0.05));
  calibPath = join(root, "calib.txt");
  writeFileSync(calibPath, CALIB_TEXTS);
});

function capture(modelDir: string, out: string, selector = "embed,blocks.*,norm,lm_head") {
  return runCapture({
    modelPath: modelDir,
    layerSelector: selector.split(","),
    calibTexts: calibPath,
    maxPositions: 64,
    outputPath: out,
    poolMode: "none",
  });
}

describe("selector matching", () => {
  const available = ["embed", "blocks.0", "blocks.1", "norm", "lm_head"];

  it("expands globs in network order", () => {
    expect(matchLayers(["blocks.*"], available)).toEqual(["blocks.0", "blocks.1"]);
    expect(matchLayers(["lm_head", "embed"], available)).toEqual(["embed", "lm_head"]);
  });

  it("rejects selectors matching nothing", () => {
    expect(() => matchLayers(["decoder.*"], available)).toThrow(ConfigurationError);
  });
});

describe("trace emission", () => {
  it("writes the trace container with full metadata", () => {
    const out = join(root, "pt-trace.safetensors");
    const result = capture(ptDir, out);
    expect(result.pieces).toBe(3);
    expect(result.layers).toEqual(["embed", "blocks.0", "blocks.1", "norm", "lm_head"]);

    const trace = readContainer(out);
    expect(trace.metadata.kind).toBe("activation-trace");
    expect(trace.metadata.pieces).toBe("3");
    expect(JSON.parse(trace.metadata.layers)).toEqual(result.layers);
    expect(trace.metadata.model_id).toMatch(/^sha256:/);
    const tap = trace.tensors.get("act.blocks.0.piece.0")!;
    expect(tap.shape[1]).toBe(TEST_CONFIG.d_model);
    const logits = trace.tensors.get("act.lm_head.piece.0")!;
    expect(logits.shape[1]).toBe(TEST_CONFIG.vocab_size);
  });

  it("is deterministic across runs", () => {
    const a = join(root, "det-a.safetensors");
    const b = join(root, "det-b.safetensors");
    capture(ptDir, a);
    capture(ptDir, b);
    expect(readFileSync(a)).toEqual(readFileSync(b));
  });

  it("derives calib_id from tokens only, shared across models", () => {
    const a = join(root, "cid-pt.safetensors");
    const b = join(root, "cid-ft.safetensors");
    capture(ptDir, a);
    capture(ftDir, b);
    const ta = readContainer(a);
    const tb = readContainer(b);
    expect(ta.metadata.calib_id).toBe(tb.metadata.calib_id);
    expect(ta.metadata.model_id).not.toBe(tb.metadata.model_id);
  });

  it("honors a single-layer selector", () => {
    const out = join(root, "head-only.safetensors");
    const result = capture(ptDir, out, "lm_head");
    expect(result.layers).toEqual(["lm_head"]);
    const trace = readContainer(out);
    expect([...trace.tensors.keys()].every((k) => k.startsWith("act.lm_head."))).toBe(true);
  });

  it("pools positions when asked", () => {
    const out = join(root, "pooled.safetensors");
    runCapture({
      modelPath: ptDir,
      layerSelector: ["blocks.*"],
      calibTexts: calibPath,
      maxPositions: 64,
      outputPath: out,
      poolMode: "mean-over-positions",
    });
    const trace = readContainer(out);
    expect(trace.tensors.get("act.blocks.0.piece.0")!.shape).toEqual([1, TEST_CONFIG.d_model]);
  });
});

describe("command line", () => {
  it("runs the built entry point end to end", () => {
    const out = join(root, "cli-trace.safetensors");
    const stdout = execFileSync("node", [
      CLI_PATH,
      "--model", ptDir, "--layers", "embed,blocks.*,lm_head",
      "--calib", calibPath, "--out", out,
    ]).toString();
    expect(stdout).toContain("captured 4 layers x 3 pieces");
    expect(readContainer(out).metadata.kind).toBe("activation-trace");
  });

  it("exits 3 when the selector matches nothing", () => {
    let code = 0;
    try {
      execFileSync("node", [
        CLI_PATH,
        "--model", ptDir, "--layers", "decoder.*",
        "--calib", calibPath, "--out", join(root, "never.safetensors"),
      ], { stdio: "pipe" });
    } catch (e) {
      code = (e as { status: number }).status;
    }
    expect(code).toBe(3);
  });

  it("exits 4 when the model directory is missing", () => {
    let code = 0;
    try {
      execFileSync("node", [
        CLI_PATH,
        "--model", join(root, "no-such-model"), "--layers", "embed",
        "--calib", calibPath, "--out", join(root, "never.safetensors"),
      ], { stdio: "pipe" });
    } catch (e) {
      code = (e as { status: number }).status;
    }
    expect(code).toBe(4);
  });
});

describe("toolkit integration", () => {
  it("emits traces the merge toolkit reads unmodified, and a PT/FT pair "
     + "flows through coefficient derivation with every lambda in (0,1)", () => {
    const ptTrace = join(root, "int-pt.safetensors");
    const ftTrace = join(root, "int-ft.safetensors");
    capture(ptDir, ptTrace);
    capture(ftDir, ftTrace);

    // the python side must accept the files as-is
    const pieces = execFileSync("python3", [
      "-c",
      "import sys; from ckmerge import read_trace; "
      + "t = read_trace(sys.argv[1]); print(t.piece_count())",
      ptTrace,
    ]).toString().trim();
    expect(pieces).toBe("3");

    // and the coefficient command must produce valid lambdas for every tap
    const coeffsPath = join(root, "coeffs.json");
    execFileSync("ckmerge", [
      "coeffs", "--pt-trace", ptTrace, "--ft-trace", ftTrace,
      "--t", "0.7", "--out", coeffsPath,
    ]);
    const coeffs = JSON.parse(readFileSync(coeffsPath, "utf-8"));
    const layers = Object.keys(coeffs.lambdas);
    expect(layers.sort()).toEqual(["blocks.0", "blocks.1", "embed", "lm_head", "norm"]);
    for (const lam of Object.values(coeffs.lambdas) as number[]) {
      expect(lam).toBeGreaterThan(0);
      expect(lam).toBeLessThan(1);
    }
  });
});
