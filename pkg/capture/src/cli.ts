#!/usr/bin/env node
/** capture-activations: run a checkpoint over calibration texts and write
 * its per-layer activation trace.
 *
 * Exit codes follow the merge toolkit's contract: 0 success, 2 bad input,
 * 3 bad configuration, 4 I/O failure.
 */

import { parseArgs } from "node:util";

import { runCapture } from "./capture.js";
import { CaptureError } from "./errors.js";

const USAGE = `usage: capture-activations --model DIR --layers PATTERN --calib FILE --out PATH
                           [--max-positions N] [--pool none|mean-over-positions]

  --model DIR        directory with config.json and model.safetensors
  --layers PATTERN   comma-separated tap globs, e.g. "embed,blocks.*,lm_head"
  --calib FILE       text file; each non-empty line is one calibration piece
  --out PATH         trace file to write
  --max-positions N  truncate each piece to N tokens (default 512)
  --pool MODE        "none" (default) or "mean-over-positions"
`;

export function main(argv: string[]): number {
  let values;
  try {
    ({ values } = parseArgs({
      args: argv,
      options: {
        model: { type: "string" },
        layers: { type: "string" },
        calib: { type: "string" },
        out: { type: "string" },
        "max-positions": { type: "string", default: "512" },
        pool: { type: "string", default: "none" },
        help: { type: "boolean", default: false },
      },
    }));
  } catch (e) {
    process.stderr.write(`capture-activations: ${(e as Error).message}\n${USAGE}`);
    return 3;
  }
  if (values.help) {
    process.stdout.write(USAGE);
    return 0;
  }
  for (const required of ["model", "layers", "calib", "out"] as const) {
    if (!values[required]) {
      process.stderr.write(`capture-activations: --${required} is required\n${USAGE}`);
      return 3;
    }
  }
  const maxPositions = Number(values["max-positions"]);
  if (!Number.isInteger(maxPositions) || maxPositions < 1) {
    process.stderr.write(`capture-activations: bad --max-positions ${values["max-positions"]}\n`);
    return 3;
  }
  if (values.pool !== "none" && values.pool !== "mean-over-positions") {
    process.stderr.write(`capture-activations: bad --pool ${values.pool}\n`);
    return 3;
  }
  try {
    const result = runCapture({
      modelPath: values.model!,
      layerSelector: values.layers!.split(",").map((s) => s.trim()).filter(Boolean),
      calibTexts: values.calib!,
      maxPositions,
      outputPath: values.out!,
      poolMode: values.pool,
    });
    process.stdout.write(
      `captured ${result.layers.length} layers x ${result.pieces} pieces -> ${values.out}\n`,
    );
    return 0;
  } catch (e) {
    if (e instanceof CaptureError) {
      process.stderr.write(`capture-activations: error: ${e.message}\n`);
      return e.exitCode;
    }
    if ((e as NodeJS.ErrnoException).code !== undefined) {
      process.stderr.write(`capture-activations: i/o error: ${(e as Error).message}\n`);
      return 4;
    }
    throw e;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
