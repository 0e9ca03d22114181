/** Error taxonomy mirroring the merge toolkit's exit-code contract:
 *  2 malformed/incompatible inputs, 3 bad configuration, 4 I/O. */

export class CaptureError extends Error {
  exitCode = 2;
}

export class FormatError extends CaptureError {
  exitCode = 2;
}

export class ConfigurationError extends CaptureError {
  exitCode = 3;
}
