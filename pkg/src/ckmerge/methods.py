"""Merge strategies: average, task arithmetic, TIES, DARE, and their
coefficient-injected (acm-*) variants.

All strategies are pure functions of (recipe, inputs, seed).  DARE masks
come from a counter-based generator keyed by (seed, layer name), with the
flat element index as the counter position, so results are independent of
iteration order and thread schedule.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from ._version import __version__
from .errors import CompatibilityError, ConfigurationError
from .taskvector import TaskVector, apply_task_vectors, compute_task_vector
from .tensorstore import Checkpoint

METHODS = (
    "average",
    "ta",
    "ties",
    "dare-ta",
    "dare-ties",
    "acm-ta",
    "acm-ties",
    "acm-average",
)
ACM_METHODS = tuple(m for m in METHODS if m.startswith("acm-"))

MERGE_METADATA_KEY = "__merge_recipe__"


@dataclass
class MergeRecipe:
    """Declarative description of one merge run."""

    method: str
    global_lambda: float = 0.7
    ties_density: float = 0.7
    dare_drop_rate: float = 0.3
    seed: int = 0
    coefficients_path: str | list[str] | None = None
    normalize_by_n: bool = True
    base_path: str | None = None
    tuned_paths: list[str] | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown merge method {self.method!r}; expected one of {', '.join(METHODS)}"
            )
        if not 0.0 <= self.global_lambda <= 2.0:
            raise ConfigurationError(f"global_lambda {self.global_lambda} outside [0, 2]")
        if not 0.0 < self.ties_density <= 1.0:
            raise ConfigurationError(f"ties_density {self.ties_density} outside (0, 1]")
        if not 0.0 <= self.dare_drop_rate < 1.0:
            raise ConfigurationError(
                f"dare_drop_rate {self.dare_drop_rate} outside [0, 1)"
            )
        if not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an integer")
        if self.method in ACM_METHODS and self.coefficients_path is None:
            raise ConfigurationError(f"method {self.method} requires coefficients_path")

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeRecipe":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown recipe fields: {sorted(unknown)}")
        recipe = cls(**doc)
        recipe.validate()
        return recipe

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SignElection:
    """Per-element consensus sign (-1, 0, +1) across task vectors."""

    elected: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.elected[name]


def _keep_count(density: float, n: int) -> int:
    # ceil(density * n), snapping products that fall within 1e-9 of an
    # integer so binary representation of decimals like 0.7 cannot tip
    # the ceiling to the next integer
    t = density * n
    if abs(t - round(t)) < 1e-9:
        t = round(t)
    return min(n, max(0, math.ceil(t)))


def trim(v: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density*n) largest-magnitude entries per layer.

    Threshold ties are broken in favor of lower flat indices.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigurationError(f"trim density {density} outside (0, 1]")
    if density == 1.0:
        return TaskVector(
            deltas={k: a.copy() for k, a in v.deltas.items()},
            base_id=v.base_id,
            source_id=v.source_id,
        )
    out = {}
    for name, delta in v.deltas.items():
        flat = delta.ravel()
        m = _keep_count(density, flat.size)
        order = np.argsort(-np.abs(flat), kind="stable")
        kept = np.zeros_like(flat)
        kept[order[:m]] = flat[order[:m]]
        out[name] = kept.reshape(delta.shape)
    return TaskVector(deltas=out, base_id=v.base_id, source_id=v.source_id)


def _check_aligned(vectors: Sequence[TaskVector]) -> None:
    if not vectors:
        raise CompatibilityError("need at least one task vector")
    names = vectors[0].names()
    for i, v in enumerate(vectors[1:], 1):
        if v.names() != names:
            raise CompatibilityError(f"vector #{i} layer names differ from vector #0")
        for name in names:
            if v[name].shape != vectors[0][name].shape:
                raise CompatibilityError(
                    f"vector #{i} layer {name!r} shape {v[name].shape} "
                    f"!= {vectors[0][name].shape}"
                )


def elect_signs(vectors: Sequence[TaskVector]) -> SignElection:
    """Per element, the sign backed by the larger total magnitude mass.

    Exact nonzero ties elect +1; zero total mass elects 0.
    """
    _check_aligned(vectors)
    elected = {}
    for name in vectors[0].names():
        pos = np.zeros(vectors[0][name].shape, dtype=np.float64)
        neg = np.zeros_like(pos)
        for v in vectors:
            d = v[name]
            pos += np.where(d > 0, d, 0.0)
            neg += np.where(d < 0, -d, 0.0)
        signs = np.where(pos >= neg, 1, -1).astype(np.int8)
        signs[(pos == 0) & (neg == 0)] = 0
        elected[name] = signs
    return SignElection(elected=elected)


def disjoint_merge(vectors: Sequence[TaskVector], election: SignElection) -> TaskVector:
    """Mean of sign-agreeing entries per element; 0 where none agree."""
    _check_aligned(vectors)
    merged = {}
    for name in vectors[0].names():
        signs = election[name]
        if signs.shape != vectors[0][name].shape:
            raise CompatibilityError(f"election shape mismatch for layer {name!r}")
        total = np.zeros(signs.shape, dtype=np.float64)
        count = np.zeros(signs.shape, dtype=np.int64)
        for v in vectors:
            d = v[name]
            agree = ((signs > 0) & (d > 0)) | ((signs < 0) & (d < 0))
            total += np.where(agree, d, 0.0)
            count += agree
        merged[name] = total / np.maximum(count, 1)
    combined = hashlib.sha256(
        "|".join(v.source_id for v in vectors).encode()
    ).hexdigest()
    return TaskVector(
        deltas=merged, base_id=vectors[0].base_id, source_id=f"ties:{combined}"
    )


def _coefficients_id(c) -> str:
    lambdas = getattr(c, "lambdas", c)
    doc = {
        "lambdas": {k: float(v) for k, v in sorted(lambdas.items())},
        "t": getattr(c, "t", None),
        "shift": getattr(c, "shift", None),
        "model_id": getattr(c, "model_id", None),
    }
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def _layer_key(seed: int, layer: str) -> int:
    word = int.from_bytes(hashlib.sha256(layer.encode("utf-8")).digest()[:8], "little")
    return (seed & 0xFFFFFFFFFFFFFFFF) | (word << 64)


def dare_transform(v: TaskVector, drop_rate: float, seed: int) -> TaskVector:
    """Zero each element with probability drop_rate; survivors scale by 1/(1-r).

    Element i of a layer is dropped iff the i-th 64-bit word of a Philox
    stream keyed by (seed, layer name) falls below r * 2^64, so the mask is
    a pure function of (seed, layer, index).
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigurationError(f"dare drop rate {drop_rate} outside [0, 1)")
    if drop_rate == 0.0:
        return TaskVector(
            deltas={k: a.copy() for k, a in v.deltas.items()},
            base_id=v.base_id,
            source_id=v.source_id,
        )
    threshold = np.uint64(int(drop_rate * 2.0**64))
    out = {}
    for name, delta in v.deltas.items():
        flat = delta.ravel()
        raw = np.random.Philox(key=_layer_key(seed, name)).random_raw(flat.size)
        dropped = raw < threshold
        out[name] = np.where(dropped, 0.0, flat / (1.0 - drop_rate)).reshape(delta.shape)
    return TaskVector(deltas=out, base_id=v.base_id, source_id=v.source_id)


def _resolve_lambdas(m: Mapping[str, float], names: Sequence[str]) -> dict[str, float]:
    """Expand per-layer coefficients onto parameter names.

    A coefficient keyed "layer.0" covers every parameter of that layer
    ("layer.0.weight", ...); exact names win as the longest match.
    """
    resolved = {}
    for name in names:
        parts = name.split(".")
        for cut in range(len(parts), 0, -1):
            prefix = ".".join(parts[:cut])
            if prefix in m:
                resolved[name] = float(m[prefix])
                break
        else:
            raise ConfigurationError(f"no coefficient for layer {name!r}")
    return resolved


def _lambda_maps(
    coefficients: Sequence, n: int, names: Sequence[str]
) -> list[dict[str, float]]:
    if coefficients is None:
        raise ConfigurationError("acm-* methods require layer coefficients")
    maps = [getattr(c, "lambdas", c) for c in coefficients]
    if len(maps) == 1 and n > 1:
        maps = maps * n  # one coefficient set shared by all models
    if len(maps) != n:
        raise ConfigurationError(
            f"{len(maps)} coefficient sets for {n} tuned models"
        )
    return [_resolve_lambdas(m, names) for m in maps]


def _mean_lambda_map(maps: Sequence[Mapping[str, float]], names: Sequence[str]) -> dict:
    return {
        name: sum(m[name] for m in maps) / len(maps) for name in names
    }


def run_merge(
    recipe: MergeRecipe,
    base: Checkpoint,
    tuned: Sequence[Checkpoint],
    coefficients: Sequence | None = None,
    threads: int = 1,
) -> Checkpoint:
    """Dispatch a merge recipe over a base model and N tuned models.

    DARE variants derive the per-model stream seed as recipe.seed + model
    index, so each model is pruned independently but reproducibly.  For
    acm-* methods, coefficient keys cover parameters by exact name or by
    dot-boundary prefix ("layer.0" covers "layer.0.weight").  The output
    checkpoint embeds the recipe echo and input hashes under the
    "__merge_recipe__" metadata key; re-running the recorded recipe on the
    same inputs is bit-identical.
    """
    recipe.validate()
    if not tuned:
        raise ConfigurationError("need at least one tuned model to merge")
    vectors = [compute_task_vector(base, t) for t in tuned]
    n = len(vectors)
    lam = recipe.global_lambda

    if recipe.method in ("dare-ta", "dare-ties"):
        vectors = [
            dare_transform(v, recipe.dare_drop_rate, recipe.seed + i)
            for i, v in enumerate(vectors)
        ]

    method = recipe.method
    if method == "average":
        merged = apply_task_vectors(
            base, vectors, [1.0] * n, recipe.normalize_by_n, threads
        )
    elif method in ("ta", "dare-ta"):
        merged = apply_task_vectors(
            base, vectors, [lam] * n, recipe.normalize_by_n, threads
        )
    elif method in ("ties", "dare-ties"):
        trimmed = [trim(v, recipe.ties_density) for v in vectors]
        consensus = disjoint_merge(trimmed, elect_signs(trimmed))
        merged = apply_task_vectors(base, [consensus], [lam], True, threads)
    elif method in ("acm-ta", "acm-average"):
        maps = _lambda_maps(coefficients, n, base.names())
        normalize = True if method == "acm-average" else recipe.normalize_by_n
        merged = apply_task_vectors(base, vectors, maps, normalize, threads)
    elif method == "acm-ties":
        maps = _lambda_maps(coefficients, n, base.names())
        trimmed = [trim(v, recipe.ties_density) for v in vectors]
        consensus = disjoint_merge(trimmed, elect_signs(trimmed))
        # the consensus delta is a single vector, so the per-model
        # coefficients collapse to their mean (exact for N=1)
        mean_map = _mean_lambda_map(maps, base.names())
        merged = apply_task_vectors(base, [consensus], [mean_map], True, threads)
    else:  # pragma: no cover - validate() already rejects
        raise ConfigurationError(f"unknown method {method!r}")

    # the echo identifies inputs by content hash and omits filesystem
    # paths, so the same inputs and settings give identical bytes no
    # matter where the files lived
    echo = {
        k: v for k, v in recipe.to_dict().items()
        if k not in ("base_path", "tuned_paths", "coefficients_path")
    }
    record = {
        "recipe": echo,
        "base_id": vectors[0].base_id,
        "tuned_ids": [v.source_id for v in vectors],
        "coefficient_ids": [
            _coefficients_id(c) for c in (coefficients or [])
        ] if method in ACM_METHODS else [],
        "tool_version": __version__,
    }
    merged.metadata = dict(merged.metadata)
    merged.metadata[MERGE_METADATA_KEY] = json.dumps(record, sort_keys=True)
    return merged
