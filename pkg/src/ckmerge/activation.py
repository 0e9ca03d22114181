"""Activation traces and a deterministic toy forward-pass engine.

The toy engine is a plain feed-forward stack (optional input projection
"embed", hidden layers "layer.{k}", optional output projection "lm_head").
It exists so the coefficient pipeline can be exercised end to end without
any ML runtime: the downstream estimators only consume named activation
tensors and are agnostic to how they were produced.

Traces are stored in the checkpoint container under keys
``act.{layer}.piece.{index}`` with F32 values, one tensor per calibration
piece, shaped [positions x hidden].
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import CompatibilityError, ConfigurationError, FormatError
from .tensorstore import Checkpoint, load_checkpoint, save_checkpoint

_TRACE_KIND = "activation-trace"
_CALIB_KIND = "calibration-set"

_SQRT1_2 = np.float32(1.0 / np.sqrt(2.0))
_ACTIVATIONS = {
    "identity": lambda a: a,
    "relu": lambda a: np.maximum(a, np.float32(0.0)),
    "gelu": lambda a: (a * (erf(a * _SQRT1_2) + np.float32(1.0)) * np.float32(0.5)),
}


@dataclass
class ToyModelSpec:
    """Shape of the toy feed-forward stack.

    layer_dims lists d_0 .. d_L; hidden transform k maps d_k -> d_{k+1}
    with weight key "layer.{k}.weight".  When enabled, "embed.weight" is a
    square d_0 projection applied first and "lm_head.weight" a square d_L
    projection applied last; both are linear taps.
    """

    layer_dims: list[int]
    activation_fn: str = "relu"
    has_embed: bool = True
    has_head: bool = True

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ConfigurationError("layer_dims needs at least one hidden transform")
        if any(not isinstance(d, int) or d < 1 for d in self.layer_dims):
            raise ConfigurationError(f"invalid layer_dims {self.layer_dims!r}")
        if self.activation_fn not in _ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation_fn {self.activation_fn!r}; "
                f"expected one of {sorted(_ACTIVATIONS)}"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**doc)

    def layer_names(self) -> list[str]:
        names = ["embed"] if self.has_embed else []
        names += [f"layer.{k}" for k in range(len(self.layer_dims) - 1)]
        if self.has_head:
            names.append("lm_head")
        return names


@dataclass
class CalibrationSet:
    """Input pieces for trace generation, all sharing input width d_0."""

    pieces: list[np.ndarray]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.pieces:
            raise ConfigurationError("calibration set is empty")
        self.pieces = [np.asarray(p, dtype=np.float32) for p in self.pieces]
        widths = {p.shape[-1] for p in self.pieces}
        if any(p.ndim != 2 for p in self.pieces) or len(widths) != 1:
            raise ConfigurationError(
                "calibration pieces must be 2-D [positions x width] with equal width"
            )
        if not self.ids:
            self.ids = [f"piece-{i}" for i in range(len(self.pieces))]
        if len(self.ids) != len(self.pieces):
            raise ConfigurationError("one id per calibration piece required")

    def calib_id(self) -> str:
        h = hashlib.sha256()
        for p in self.pieces:
            h.update(struct.pack("<II", *p.shape))
            h.update(np.ascontiguousarray(p).tobytes())
        return "sha256:" + h.hexdigest()


@dataclass
class ActivationTrace:
    """Per-layer, per-piece activation tensors for one model."""

    model_id: str
    calib_id: str
    layers: dict[str, list[np.ndarray]]

    def __post_init__(self):
        counts = {len(pieces) for pieces in self.layers.values()}
        if len(counts) > 1:
            raise FormatError("piece count differs across trace layers")
        names = list(self.layers)
        for p in range(self.piece_count()):
            positions = {self.layers[name][p].shape[0] for name in names}
            if len(positions) > 1:
                raise FormatError(f"piece {p} position count differs across layers")

    def layer_names(self) -> list[str]:
        return list(self.layers)

    def piece_count(self) -> int:
        return len(next(iter(self.layers.values()))) if self.layers else 0


def _weight(weights: Checkpoint, key: str, shape: tuple[int, int]) -> np.ndarray:
    if key not in weights:
        raise CompatibilityError(f"weights missing tensor {key!r}")
    w = weights[key].astype(np.float32)
    if w.shape != shape:
        raise CompatibilityError(
            f"weight {key!r} has shape {list(w.shape)}, expected {list(shape)}"
        )
    return w


def toy_forward(
    spec: ToyModelSpec, weights: Checkpoint, calib: CalibrationSet
) -> ActivationTrace:
    """Run the stack over every calibration piece, recording each tap.

    Hidden activations are recorded post-nonlinearity; embed and lm_head
    taps are linear.  All arithmetic is F32, so identical inputs yield
    bit-identical traces.
    """
    dims = spec.layer_dims
    act = _ACTIVATIONS[spec.activation_fn]
    w_embed = _weight(weights, "embed.weight", (dims[0], dims[0])) if spec.has_embed else None
    w_hidden = [
        _weight(weights, f"layer.{k}.weight", (dims[k], dims[k + 1]))
        for k in range(len(dims) - 1)
    ]
    w_head = _weight(weights, "lm_head.weight", (dims[-1], dims[-1])) if spec.has_head else None

    layers: dict[str, list[np.ndarray]] = {name: [] for name in spec.layer_names()}
    for piece in calib.pieces:
        if piece.shape[1] != dims[0]:
            raise CompatibilityError(
                f"calibration piece width {piece.shape[1]} != input dim {dims[0]}"
            )
        a = piece
        if w_embed is not None:
            a = a @ w_embed
            layers["embed"].append(a)
        for k, w in enumerate(w_hidden):
            a = act(a @ w)
            layers[f"layer.{k}"].append(a)
        if w_head is not None:
            layers["lm_head"].append(a @ w_head)
    return ActivationTrace(
        model_id=weights.content_hash(), calib_id=calib.calib_id(), layers=layers
    )


def write_trace(trace: ActivationTrace, path) -> None:
    tensors = {}
    for layer, pieces in trace.layers.items():
        if ".piece." in layer or layer.startswith("act."):
            raise FormatError(f"layer name {layer!r} collides with trace key syntax")
        for i, arr in enumerate(pieces):
            tensors[f"act.{layer}.piece.{i}"] = np.asarray(arr, dtype=np.float32)
    meta = {
        "kind": _TRACE_KIND,
        "model_id": trace.model_id,
        "calib_id": trace.calib_id,
        "layers": json.dumps(trace.layer_names()),
        "pieces": str(trace.piece_count()),
    }
    save_checkpoint(Checkpoint(tensors=tensors, metadata=meta), path)


def read_trace(path) -> ActivationTrace:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != _TRACE_KIND:
        raise FormatError(f"{path}: not an activation trace file")
    try:
        layer_order = json.loads(ckpt.metadata["layers"])
        piece_count = int(ckpt.metadata["pieces"])
        model_id, calib_id = ckpt.metadata["model_id"], ckpt.metadata["calib_id"]
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad trace metadata: {e}") from e

    found: dict[str, dict[int, np.ndarray]] = {}
    for key in ckpt:
        if not key.startswith("act.") or ".piece." not in key:
            raise FormatError(f"{path}: unexpected tensor key {key!r}")
        stem, index = key.rsplit(".piece.", 1)
        layer = stem[len("act."):]
        arr = ckpt[key]
        if arr.ndim != 2 or arr.dtype != np.float32:
            raise FormatError(f"{path}: trace tensor {key!r} must be 2-D F32")
        found.setdefault(layer, {})[int(index)] = arr
    if sorted(found) != sorted(layer_order):
        raise FormatError(f"{path}: trace layers do not match metadata layer list")
    layers = {}
    for layer in layer_order:
        pieces = found[layer]
        if sorted(pieces) != list(range(piece_count)):
            raise FormatError(
                f"{path}: layer {layer!r} has pieces {sorted(pieces)}, "
                f"expected 0..{piece_count - 1}"
            )
        layers[layer] = [pieces[i] for i in range(piece_count)]
    return ActivationTrace(model_id=model_id, calib_id=calib_id, layers=layers)


def write_calibration(calib: CalibrationSet, path) -> None:
    tensors = {f"calib.piece.{i}": p for i, p in enumerate(calib.pieces)}
    meta = {"kind": _CALIB_KIND, "ids": json.dumps(calib.ids)}
    save_checkpoint(Checkpoint(tensors=tensors, metadata=meta), path)


def read_calibration(path) -> CalibrationSet:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != _CALIB_KIND:
        raise FormatError(f"{path}: not a calibration set file")
    try:
        ids = json.loads(ckpt.metadata["ids"])
    except (KeyError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad calibration metadata: {e}") from e
    by_index = {}
    for key in ckpt:
        if not key.startswith("calib.piece."):
            raise FormatError(f"{path}: unexpected tensor key {key!r}")
        by_index[int(key[len("calib.piece."):])] = ckpt[key]
    if sorted(by_index) != list(range(len(by_index))):
        raise FormatError(f"{path}: calibration piece indices not contiguous")
    pieces = [np.asarray(by_index[i], dtype=np.float32) for i in range(len(by_index))]
    return CalibrationSet(pieces=pieces, ids=ids)
