"""Mutual information between paired activation traces, and the
translation-plus-sigmoid mapping from per-layer MI to merge coefficients.

The estimator is a plug-in histogram on equal-frequency (quantile) bins,
reported in nats.  Quantile binning is robust to activation scale and
outliers and puts the self-MI ceiling near ln(bins).  Scalars are paired
at identical (piece, position, hidden-index) coordinates, the only
alignment that needs no extra assumptions about the sample space.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .activation import ActivationTrace
from .errors import (
    CompatibilityError,
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    ProvenanceError,
)

DEFAULT_BINS = 32


def mi_from_joint(counts) -> float:
    """Plug-in mutual information (nats) of a joint count table."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return 0.0
    pxy = c / total
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def entropy_from_counts(counts) -> float:
    """Plug-in entropy (nats) of a marginal count vector."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(-np.sum(p * np.log(p)))


def _quantile_bin(v: np.ndarray, bins: int) -> tuple[np.ndarray, int]:
    """Equal-frequency bin indices; duplicate quantile edges collapse.

    Indices are re-labelled densely over occupied bins, so the returned
    count is the number of distinct bins actually hit (1 for constants).
    """
    qs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    edges = np.unique(np.quantile(v, qs))
    idx = np.searchsorted(edges, v, side="right")
    occupied, dense = np.unique(idx, return_inverse=True)
    return dense, len(occupied)


@dataclass
class MIDetail:
    mi: float
    bins_x: int
    bins_y: int
    degenerate: bool  # either marginal collapsed to a single bin


def estimate_mi_detail(x, y, bins: int = DEFAULT_BINS) -> MIDetail:
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InsufficientDataError(f"sample lengths differ: {x.size} vs {y.size}")
    if x.size < 2 * bins:
        raise InsufficientDataError(
            f"need at least {2 * bins} samples for {bins} bins, got {x.size}"
        )
    bx, nx = _quantile_bin(x, bins)
    by, ny = _quantile_bin(y, bins)
    if nx == 1 or ny == 1:
        return MIDetail(mi=0.0, bins_x=nx, bins_y=ny, degenerate=True)
    joint = np.bincount(bx * ny + by, minlength=nx * ny).reshape(nx, ny)
    return MIDetail(mi=mi_from_joint(joint), bins_x=nx, bins_y=ny, degenerate=False)


def estimate_mi(x, y, bins: int = DEFAULT_BINS) -> float:
    """Plug-in MI (nats) between two paired sample vectors."""
    return estimate_mi_detail(x, y, bins).mi


@dataclass
class MIEstimate:
    """Per-layer, per-piece MI values plus their per-layer means."""

    per_layer_per_piece: dict[str, list[float]]
    per_layer_mean: dict[str, float]
    bins: int
    estimator: str = "histogram-quantile"
    degenerate: list[list] = field(default_factory=list)  # [layer, piece] pairs

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "bins": self.bins,
            "per_layer_per_piece": self.per_layer_per_piece,
            "per_layer_mean": self.per_layer_mean,
            "degenerate": self.degenerate,
        }


def layer_mi(
    pt_trace: ActivationTrace,
    ft_trace: ActivationTrace,
    bins: int = DEFAULT_BINS,
    pooled: bool = False,
) -> MIEstimate:
    """MI between two models' activations, layer by layer.

    Default aggregation is the mean over per-piece estimates (the
    translation step needs the per-piece maximum); ``pooled`` concatenates
    all pieces into one sample set per layer instead.
    """
    if pt_trace.calib_id != ft_trace.calib_id:
        raise ProvenanceError(
            "traces come from different calibration sets: "
            f"{pt_trace.calib_id[:19]}... vs {ft_trace.calib_id[:19]}..."
        )
    if sorted(pt_trace.layers) != sorted(ft_trace.layers):
        raise CompatibilityError("traces do not share layer names")
    per_piece: dict[str, list[float]] = {}
    means: dict[str, float] = {}
    degenerate: list[list] = []
    for layer in pt_trace.layer_names():
        pt_pieces, ft_pieces = pt_trace.layers[layer], ft_trace.layers[layer]
        if len(pt_pieces) != len(ft_pieces):
            raise CompatibilityError(f"piece count differs for layer {layer!r}")
        for p, (a, b) in enumerate(zip(pt_pieces, ft_pieces)):
            if a.shape != b.shape:
                raise CompatibilityError(
                    f"layer {layer!r} piece {p} shapes differ: {a.shape} vs {b.shape}"
                )
        if pooled:
            x = np.concatenate([a.ravel() for a in pt_pieces])
            y = np.concatenate([b.ravel() for b in ft_pieces])
            detail = estimate_mi_detail(x, y, bins)
            values = [detail.mi]
            if detail.degenerate:
                degenerate.append([layer, 0])
        else:
            values = []
            for p, (a, b) in enumerate(zip(pt_pieces, ft_pieces)):
                detail = estimate_mi_detail(a.ravel(), b.ravel(), bins)
                values.append(detail.mi)
                if detail.degenerate:
                    degenerate.append([layer, p])
        per_piece[layer] = values
        means[layer] = float(np.mean(values))
    return MIEstimate(
        per_layer_per_piece=per_piece,
        per_layer_mean=means,
        bins=bins,
        degenerate=degenerate,
    )


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class LayerCoefficients:
    """Per-layer merge coefficients for one model."""

    model_id: str
    lambdas: dict[str, float]
    t: float
    shift: float

    def validate(self) -> None:
        for layer, lam in self.lambdas.items():
            if not (isinstance(lam, float) and 0.0 < lam < 1.0):
                raise FormatError(
                    f"coefficient for layer {layer!r} is {lam!r}, outside (0, 1)"
                )


def compute_coefficients(
    mi: MIEstimate, t: float, model_id: str = ""
) -> LayerCoefficients:
    """Translate MI means by the global per-piece maximum and map through
    a flipped sigmoid: lambda_k = 1 - sigmoid(t * (mean_k - shift)).

    The shift makes all inputs non-positive, so for t > 0 every
    coefficient lands in [0.5, 1) and higher-MI layers get strictly lower
    weight.  Adding any constant to all raw MI values cancels exactly.
    """
    if not mi.per_layer_mean:
        raise ConfigurationError("MI estimate is empty")
    shift = max(v for values in mi.per_layer_per_piece.values() for v in values)
    lambdas = {
        layer: 1.0 - _sigmoid(t * (mean - shift))
        for layer, mean in mi.per_layer_mean.items()
    }
    return LayerCoefficients(model_id=model_id, lambdas=lambdas, t=t, shift=shift)


def write_coefficients(c: LayerCoefficients, path) -> None:
    doc = {"model_id": c.model_id, "t": c.t, "shift": c.shift, "lambdas": c.lambdas}
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_coefficients(path) -> LayerCoefficients:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid coefficient JSON: {e}") from e
    try:
        c = LayerCoefficients(
            model_id=doc["model_id"],
            lambdas={k: float(v) for k, v in doc["lambdas"].items()},
            t=float(doc["t"]),
            shift=float(doc["shift"]),
        )
    except (KeyError, TypeError, AttributeError, ValueError) as e:
        raise FormatError(f"{path}: bad coefficient file structure: {e}") from e
    c.validate()
    return c


def write_mi_report(mi: MIEstimate, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(mi.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
