"""Calibration subset selection: seeded k-means over embedding vectors,
followed by even per-cluster sampling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError
from .tensorstore import Checkpoint, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

_EMBED_KIND = "embedding-set"


@dataclass
class EmbeddingSet:
    """One embedding vector per candidate item."""

    vectors: np.ndarray
    item_ids: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ConfigurationError("embeddings must be a nonempty [items x dim] matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ConfigurationError("embeddings contain non-finite values")
        if len(self.item_ids) != self.vectors.shape[0]:
            raise ConfigurationError("one id per embedding row required")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ConfigurationError("item ids must be unique")

    def __len__(self):
        return self.vectors.shape[0]


@dataclass
class SamplePlan:
    k: int = 20
    fraction: float = 0.10
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-6
    mode: str = "equal"  # or "proportional"

    def validate(self, items: int) -> None:
        if self.k < 1 or self.k > items:
            raise ConfigurationError(f"k={self.k} must be in [1, {items}]")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"fraction {self.fraction} outside (0, 1]")
        if self.mode not in ("equal", "proportional"):
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")
        if int(round(self.fraction * items)) < self.k:
            logger.warning(
                "sample target %d is below k=%d; some clusters go unsampled",
                int(round(self.fraction * items)), self.k,
            )


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(c * c, axis=1)[None, :]
        - 2.0 * (x @ c.T)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1])[:, 0])
    return centroids


def kmeans(e: EmbeddingSet, plan: SamplePlan) -> KMeansResult:
    """Lloyd's iterations from a seeded k-means++ start.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid, which never increases the objective; inertia is asserted
    non-increasing after every assignment.  Stops when the largest centroid
    move drops below plan.tol or after plan.max_iters iterations.
    """
    plan.validate(len(e))
    x = e.vectors
    n, k = x.shape[0], plan.k
    rng = np.random.default_rng(plan.seed)
    centroids = _kmeanspp_init(x, k, rng)

    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for _ in range(plan.max_iters):
        iterations += 1
        d2 = _sq_dists(x, centroids)
        labels = np.argmin(d2, axis=1)
        assigned = d2[np.arange(n), labels].copy()
        present = set(np.unique(labels).tolist())
        for j in range(k):
            if j in present:
                continue
            far = int(np.argmax(assigned))
            centroids[j] = x[far]
            labels[far] = j
            assigned[far] = 0.0
            present.add(j)
        inertia = float(assigned.sum())
        if history:
            assert inertia <= history[-1] * (1 + 1e-12) + 1e-12, (
                f"k-means objective increased: {history[-1]} -> {inertia}"
            )
        history.append(inertia)

        new_centroids = np.empty_like(centroids)
        for j in range(k):
            members = x[labels == j]
            new_centroids[j] = members.mean(axis=0)
        shift = float(np.sqrt(np.max(np.sum((new_centroids - centroids) ** 2, axis=1))))
        centroids = new_centroids
        if shift < plan.tol:
            break
    return KMeansResult(
        labels=labels, centroids=centroids, inertia_history=history,
        iterations=iterations,
    )


def _quotas(sizes: np.ndarray, m: int, k: int, mode: str) -> np.ndarray:
    order = sorted(range(k), key=lambda c: (-sizes[c], c))
    quota = np.zeros(k, dtype=np.int64)
    if mode == "equal":
        quota[:] = m // k
        for c in order[: m % k]:
            quota[c] += 1
    else:  # proportional, largest-remainder apportionment
        n = int(sizes.sum())
        ideal = m * sizes / n
        quota = np.floor(ideal).astype(np.int64)
        rem = m - int(quota.sum())
        frac_order = sorted(range(k), key=lambda c: (-(ideal[c] - quota[c]), c))
        for c in frac_order[:rem]:
            quota[c] += 1
    take = np.minimum(quota, sizes)
    deficit = m - int(take.sum())
    while deficit > 0:
        progressed = False
        for c in order:
            if deficit == 0:
                break
            if take[c] < sizes[c]:
                take[c] += 1
                deficit -= 1
                progressed = True
        if not progressed:
            break  # fewer items than requested overall
    return take


def even_sample(e: EmbeddingSet, result: KMeansResult, plan: SamplePlan) -> list[str]:
    """Pick round(fraction*items) ids, spread evenly across clusters.

    Equal per-cluster quotas by default (the m mod k remainder goes to the
    largest clusters); within a cluster, items closest to the centroid are
    taken first; quota that a small cluster cannot fill moves to the next
    largest clusters.
    """
    plan.validate(len(e))
    n, k = len(e), plan.k
    m = min(int(round(plan.fraction * n)), n)
    if m == 0:
        return []
    sizes = np.bincount(result.labels, minlength=k)
    take = _quotas(sizes, m, k, plan.mode)
    d2 = _sq_dists(e.vectors, result.centroids)
    chosen: list[str] = []
    for c in range(k):
        members = np.flatnonzero(result.labels == c)
        ranked = sorted(members, key=lambda i: (d2[i, c], i))
        chosen.extend(e.item_ids[i] for i in ranked[: take[c]])
    return chosen


def sample_calibration(e: EmbeddingSet, plan: SamplePlan) -> list[str]:
    """Cluster then sample in one step."""
    return even_sample(e, kmeans(e, plan), plan)


def write_embeddings(e: EmbeddingSet, path) -> None:
    ckpt = Checkpoint(
        tensors={"embeddings": e.vectors},
        metadata={"kind": _EMBED_KIND, "ids": json.dumps(e.item_ids)},
    )
    save_checkpoint(ckpt, path)


def read_embeddings(path) -> EmbeddingSet:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != _EMBED_KIND or "embeddings" not in ckpt:
        raise FormatError(f"{path}: not an embedding-set file")
    try:
        ids = json.loads(ckpt.metadata["ids"])
    except (KeyError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad embedding metadata: {e}") from e
    return EmbeddingSet(vectors=ckpt["embeddings"], item_ids=ids)
