"""Task vectors: per-layer parameter deltas against a shared base model.

Deltas are computed and held in F64.  The exact difference of two F32 (or
BF16) tensors is representable in F64, so applying a vector back onto its
base with unit coefficient reproduces the tuned weights bit-exactly after
the final cast to storage dtype.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, ProvenanceError
from .tensorstore import Checkpoint, assert_compatible, load_checkpoint, save_checkpoint, widen

_KIND = "task-vector"


@dataclass
class TaskVector:
    """Per-layer delta tensors plus provenance hashes of both endpoints."""

    deltas: dict[str, np.ndarray]
    base_id: str
    source_id: str

    def __post_init__(self):
        self.deltas = {k: self.deltas[k] for k in sorted(self.deltas)}

    def names(self) -> list[str]:
        return list(self.deltas)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]


@dataclass
class LayerSalience:
    frobenius_norm: float
    max_abs: float
    param_count: int


@dataclass
class SalienceReport:
    """Per-layer delta magnitude diagnostics.

    The Frobenius norm upper-bounds the spectral norm, which in turn bounds
    how much a weight delta can perturb any unit-norm input's activation.
    """

    per_layer: dict[str, LayerSalience] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            name: {
                "frobenius_norm": s.frobenius_norm,
                "max_abs": s.max_abs,
                "param_count": s.param_count,
            }
            for name, s in self.per_layer.items()
        }


def compute_task_vector(base: Checkpoint, tuned: Checkpoint) -> TaskVector:
    """Delta of tuned minus base, widened to F64 before subtracting."""
    assert_compatible(base, tuned)
    deltas = {name: widen(tuned[name]) - widen(base[name]) for name in base}
    return TaskVector(
        deltas=deltas, base_id=base.content_hash(), source_id=tuned.content_hash()
    )


def _coefficient_for(
    coeff: float | Mapping[str, float], layer: str, index: int
) -> float:
    if isinstance(coeff, Mapping):
        if layer not in coeff:
            raise ConfigurationError(
                f"no coefficient for layer {layer!r} of vector #{index}"
            )
        return float(coeff[layer])
    return float(coeff)


def apply_task_vectors(
    base: Checkpoint,
    vectors: Sequence[TaskVector],
    coefficients: Sequence[float | Mapping[str, float]],
    normalize_by_n: bool = True,
    threads: int = 1,
) -> Checkpoint:
    """Merge: base[k] + (1/N) * sum_i coeff_i[k] * delta_i[k].

    ``coefficients`` holds one entry per vector, either a scalar or a
    per-layer map covering every layer.  The 1/N factor is dropped when
    normalize_by_n is false.  Summation runs in vector-index order; layers
    may be processed in parallel and the result is assembled in name order,
    so the output is identical for any thread count.
    """
    if len(vectors) != len(coefficients):
        raise ConfigurationError(
            f"{len(vectors)} vectors but {len(coefficients)} coefficient entries"
        )
    base_id = base.content_hash()
    for i, vec in enumerate(vectors):
        if vec.base_id != base_id:
            raise ProvenanceError(
                f"vector #{i} was computed against base {vec.base_id[:19]}..., "
                f"not {base_id[:19]}..."
            )
        if vec.names() != base.names():
            raise ProvenanceError(f"vector #{i} layer names do not match base")
    scale = 1.0 / len(vectors) if (normalize_by_n and vectors) else 1.0

    def merge_layer(name: str) -> np.ndarray:
        acc = widen(base[name]).copy()
        for i, vec in enumerate(vectors):
            lam = _coefficient_for(coefficients[i], name, i)
            acc += (scale * lam) * vec[name]
        return acc.astype(base[name].dtype)

    names = base.names()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            merged = dict(zip(names, ex.map(merge_layer, names)))
    else:
        merged = {name: merge_layer(name) for name in names}
    return Checkpoint(tensors=merged)


def salience_report(v: TaskVector) -> SalienceReport:
    """Frobenius norm, max-abs and parameter count of each layer's delta."""
    report = SalienceReport()
    for name, delta in v.deltas.items():
        if delta.size:
            fro = float(np.sqrt(np.sum(np.square(widen(delta)))))
            mx = float(np.max(np.abs(widen(delta))))
        else:
            fro, mx = 0.0, 0.0
        report.per_layer[name] = LayerSalience(fro, mx, int(delta.size))
    return report


def save_task_vector(v: TaskVector, path) -> None:
    ckpt = Checkpoint(
        tensors=dict(v.deltas),
        metadata={"kind": _KIND, "base_id": v.base_id, "source_id": v.source_id},
    )
    save_checkpoint(ckpt, path, dtype_policy="preserve")


def load_task_vector(path) -> TaskVector:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != _KIND:
        raise FormatError(f"{path}: not a task-vector file")
    try:
        base_id, source_id = ckpt.metadata["base_id"], ckpt.metadata["source_id"]
    except KeyError as e:
        raise FormatError(f"{path}: task-vector file lacks provenance ids") from e
    deltas = {name: widen(ckpt[name]) for name in ckpt}
    return TaskVector(deltas=deltas, base_id=base_id, source_id=source_id)
