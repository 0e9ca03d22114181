"""Command-line surface wiring the modules into reproducible pipelines.

Exit codes: 0 success, 2 input/compatibility error, 3 configuration error,
4 I/O error.  Every mutating command writes a ``<out>.manifest.json``
sidecar recording the command, arguments, input hashes, tool version and
seed; the timestamp field is informational and excluded from any
comparison of manifests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

from ._version import __version__
from .activation import ToyModelSpec, read_calibration, toy_forward, write_trace, read_trace
from .calib import EmbeddingSet, SamplePlan, even_sample, kmeans, read_embeddings
from .errors import CkmergeError, ConfigurationError, FormatError
from .methods import ACM_METHODS, MergeRecipe, run_merge
from .mi import compute_coefficients, layer_mi, read_coefficients, write_coefficients, write_mi_report
from .taskvector import SalienceReport, compute_task_vector, load_task_vector, salience_report, save_task_vector, TaskVector
from .tensorstore import load_checkpoint, save_checkpoint, widen


@dataclass
class RunManifest:
    command: str
    arguments: dict
    input_hashes: dict
    tool_version: str = __version__
    seed: int = 0
    timestamp: str = ""

    def write(self, out_path: str) -> None:
        doc = asdict(self)
        with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _manifest(command: str, args_map: dict, inputs: list[str], seed: int, out: str) -> None:
    RunManifest(
        command=command,
        arguments=args_map,
        input_hashes={p: _hash_file(p) for p in inputs},
        seed=seed,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    ).write(out)


def _threads_default() -> int:
    env = os.environ.get("CM_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def cmd_diff(args) -> int:
    base = load_checkpoint(args.base)
    tuned = load_checkpoint(args.model)
    save_task_vector(compute_task_vector(base, tuned), args.out)
    _manifest("diff", {"base": args.base, "model": args.model, "out": args.out},
              [args.base, args.model], 0, args.out)
    return 0


def cmd_trace(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as f:
        try:
            spec = ToyModelSpec.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.spec}: not valid model spec JSON: {e}") from e
    weights = load_checkpoint(args.weights)
    calib = read_calibration(args.calib)
    write_trace(toy_forward(spec, weights, calib), args.out)
    _manifest("trace", {"spec": args.spec, "weights": args.weights,
                        "calib": args.calib, "out": args.out},
              [args.spec, args.weights, args.calib], 0, args.out)
    return 0


def cmd_coeffs(args) -> int:
    pt = read_trace(args.pt_trace)
    ft = read_trace(args.ft_trace)
    mi = layer_mi(pt, ft, bins=args.bins, pooled=args.pooled)
    coeffs = compute_coefficients(mi, t=args.t, model_id=ft.model_id)
    write_coefficients(coeffs, args.out)
    write_mi_report(mi, f"{args.out}.report.json")
    _manifest("coeffs", {"pt_trace": args.pt_trace, "ft_trace": args.ft_trace,
                         "t": args.t, "bins": args.bins, "pooled": args.pooled,
                         "out": args.out},
              [args.pt_trace, args.ft_trace], 0, args.out)
    return 0


def _load_recipe(path: str) -> MergeRecipe:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid recipe JSON: {e}") from e
    return MergeRecipe.from_dict(doc)


def cmd_merge(args) -> int:
    recipe = _load_recipe(args.recipe)
    if args.seed is not None:
        recipe.seed = args.seed
    if not recipe.base_path or not recipe.tuned_paths:
        raise ConfigurationError("recipe must set base_path and tuned_paths")
    base = load_checkpoint(recipe.base_path)
    tuned = [load_checkpoint(p) for p in recipe.tuned_paths]
    coefficients = None
    coeff_paths: list[str] = []
    if recipe.method in ACM_METHODS:
        paths = recipe.coefficients_path
        coeff_paths = [paths] if isinstance(paths, str) else list(paths)
        coefficients = [read_coefficients(p) for p in coeff_paths]
    merged = run_merge(recipe, base, tuned, coefficients, threads=args.threads)
    save_checkpoint(merged, args.out, dtype_policy="preserve")
    inputs = [args.recipe, recipe.base_path, *recipe.tuned_paths, *coeff_paths]
    _manifest("merge", {"recipe": args.recipe, "out": args.out,
                        "threads": args.threads, "method": recipe.method},
              inputs, recipe.seed, args.out)
    return 0


def cmd_sample_calib(args) -> int:
    embeddings = read_embeddings(args.embeddings)
    plan = SamplePlan(k=args.k, fraction=args.fraction, seed=args.seed, mode=args.mode)
    ids = even_sample(embeddings, kmeans(embeddings, plan), plan)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(ids, f, indent=2)
        f.write("\n")
    _manifest("sample-calib", {"embeddings": args.embeddings, "k": args.k,
                               "fraction": args.fraction, "mode": args.mode,
                               "out": args.out},
              [args.embeddings], args.seed, args.out)
    return 0


def _inspect_report(path: str) -> SalienceReport:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") == "task-vector":
        return salience_report(load_task_vector(path))
    deltas = {name: widen(ckpt[name]) for name in ckpt}
    return salience_report(TaskVector(deltas=deltas, base_id="", source_id=""))


def cmd_inspect(args) -> int:
    report = _inspect_report(args.path)
    items = sorted(
        report.per_layer.items(),
        key=(lambda kv: (-kv[1].frobenius_norm, kv[0])) if args.sort == "norm"
        else (lambda kv: kv[0]),
    )
    if args.json:
        doc = {name: report.to_dict()[name] for name, _ in items}
        print(json.dumps(doc, indent=2))
        return 0
    width = max([len(name) for name, _ in items] + [5])
    print(f"{'layer':<{width}}  {'params':>10}  {'frobenius':>14}  {'max_abs':>14}")
    for name, s in items:
        print(f"{name:<{width}}  {s.param_count:>10}  {s.frobenius_norm:>14.6g}  "
              f"{s.max_abs:>14.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckmerge",
        description="Merge fine-tuned checkpoints into a base model via task "
                    "vectors, with optional activation-guided layer coefficients.",
    )
    parser.add_argument("--version", action="version", version=f"ckmerge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diff", help="compute a task vector (model minus base)")
    p.add_argument("--base", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("trace", help="run the toy engine and record activations")
    p.add_argument("--spec", required=True, help="toy model spec JSON")
    p.add_argument("--weights", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("coeffs", help="derive layer coefficients from trace MI")
    p.add_argument("--pt-trace", required=True)
    p.add_argument("--ft-trace", required=True)
    p.add_argument("--t", type=float, default=0.7)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--pooled", action="store_true",
                   help="pool pieces into one sample set per layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("merge", help="run a merge recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override recipe seed")
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker threads for layer-parallel stages "
                        "(CM_THREADS is the fallback)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("sample-calib", help="k-means + even sampling of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["equal", "proportional"], default="equal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_calib)

    p = sub.add_parser("inspect", help="per-layer norm report of a tensor file")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.add_argument("--sort", choices=["name", "norm"], default="name")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CkmergeError as e:
        print(f"ckmerge {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"ckmerge {args.command}: i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
