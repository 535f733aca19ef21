"""Per-domain, per-class prototype vectors.

A prototype is a unit-norm representative direction for one class in one
domain. Prototypes are initialized from confidence-filtered features and
then refreshed with a cosine-weighted moving average: the closer the
mini-batch mean is to the current prototype, the more it overwrites it.
Prototypes are plain buffers; no gradient ever flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, UninitializedPrototype, ZeroVector
from .mathcore import cosine_similarity, l2_normalize

DOMAINS = ("source", "target")
UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class ScoredFeatureBatch:
    """Features with class labels and confidence scores in [0, 1]."""

    features: np.ndarray  # (n, dim)
    labels: np.ndarray    # (n,) non-negative ints
    scores: np.ndarray    # (n,) floats in [0, 1]

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionMismatch(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or scores.ndim != 1:
            raise DimensionMismatch("labels and scores must be 1-D")
        if not (len(features) == len(labels) == len(scores)):
            raise DimensionMismatch(
                f"length mismatch: {len(features)} features, {len(labels)} labels, "
                f"{len(scores)} scores"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        if len(scores) and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if len(labels) and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.features)


class PrototypeSet:
    """Unit-norm prototypes for one domain, keyed by class id 0..class_count-1.

    A class stays uninitialized until a feature batch first provides it; the
    set reports which classes are live and refuses to read the others.
    """

    def __init__(self, domain: str, class_count: int, dim: int,
                 prototypes: dict[int, np.ndarray] | None = None):
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
        if class_count < 1:
            raise ValueError("class_count must be >= 1")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.domain = domain
        self.class_count = int(class_count)
        self.dim = int(dim)
        self._prototypes: dict[int, np.ndarray] = {}
        for class_id, vec in (prototypes or {}).items():
            self._store(int(class_id), vec)

    def _store(self, class_id: int, vec) -> None:
        if not (0 <= class_id < self.class_count):
            raise ValueError(f"class id {class_id} outside 0..{self.class_count - 1}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"prototype for class {class_id} has shape {vec.shape}, "
                                    f"expected ({self.dim},)")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"prototype for class {class_id} has norm {norm!r}, expected 1")
        self._prototypes[class_id] = vec

    def is_initialized(self, class_id: int) -> bool:
        return class_id in self._prototypes

    @property
    def fully_initialized(self) -> bool:
        return len(self._prototypes) == self.class_count

    def initialized_classes(self) -> list[int]:
        return sorted(self._prototypes)

    def get(self, class_id: int) -> np.ndarray:
        if class_id not in self._prototypes:
            raise UninitializedPrototype(
                f"{self.domain} prototype for class {class_id} is uninitialized")
        return self._prototypes[class_id]

    def matrix(self) -> np.ndarray:
        """All prototypes stacked as a (class_count, dim) array; requires a full set."""
        missing = [k for k in range(self.class_count) if k not in self._prototypes]
        if missing:
            raise UninitializedPrototype(
                f"{self.domain} prototypes uninitialized for classes {missing}")
        return np.stack([self._prototypes[k] for k in range(self.class_count)])

    def with_updates(self, updates: dict[int, np.ndarray]) -> "PrototypeSet":
        """New set with the given classes replaced; untouched classes share storage."""
        merged = dict(self._prototypes)
        out = PrototypeSet(self.domain, self.class_count, self.dim)
        out._prototypes = merged
        for class_id, vec in updates.items():
            out._store(int(class_id), vec)
        return out

    def to_json_dict(self) -> dict:
        return {
            "domain": self.domain,
            "dim": self.dim,
            "class_count": self.class_count,
            "prototypes": {str(k): self._prototypes[k].tolist()
                           for k in sorted(self._prototypes)},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PrototypeSet":
        protos = {int(k): np.asarray(v, dtype=np.float64)
                  for k, v in doc["prototypes"].items()}
        return cls(doc["domain"], int(doc["class_count"]), int(doc["dim"]), protos)


def initialize_prototypes(batch: ScoredFeatureBatch, threshold: float, domain: str,
                          class_count: int) -> PrototypeSet:
    """Prototype per class = normalized mean of its features scoring >= threshold.

    Classes with no qualifying feature are left uninitialized.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold!r}")
    if len(batch) == 0:
        raise EmptyBatch("cannot initialize prototypes from an empty batch")
    pset = PrototypeSet(domain, class_count, batch.features.shape[1])
    updates: dict[int, np.ndarray] = {}
    for class_id in range(class_count):
        mask = (batch.labels == class_id) & (batch.scores >= threshold)
        if np.any(mask):
            updates[class_id] = l2_normalize(batch.features[mask].mean(axis=0))
    return pset.with_updates(updates)


def minibatch_prototypes(features, labels) -> dict[int, np.ndarray]:
    """Per-class arithmetic mean of the batch features, not yet normalized."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise DimensionMismatch(f"features must be 2-D, got shape {features.shape}")
    if labels.ndim != 1 or len(labels) != len(features):
        raise DimensionMismatch("labels must be 1-D and match the feature count")
    if len(features) == 0:
        raise EmptyBatch("cannot build mini-batch prototypes from an empty batch")
    return {int(k): features[labels == k].mean(axis=0) for k in np.unique(labels)}


def blend_weight(prev, minibatch_mean) -> float:
    """Cosine similarity mapped to [0, 1]: alpha = (cos + 1) / 2."""
    return (cosine_similarity(prev, minibatch_mean) + 1.0) / 2.0


def update_prototype(prev, minibatch_mean) -> np.ndarray:
    """Blend the previous prototype toward the mini-batch mean, then renormalize.

    alpha = (cos(prev, mean) + 1) / 2, so an aligned mean replaces the
    prototype (alpha = 1) and an opposed mean leaves it unchanged (alpha = 0).
    The mean is deliberately not normalized before blending; only the result is.
    """
    prev = np.asarray(prev, dtype=np.float64)
    alpha = blend_weight(prev, minibatch_mean)
    blended = (1.0 - alpha) * prev + alpha * np.asarray(minibatch_mean, dtype=np.float64)
    return l2_normalize(blended)


def update_all(pset: PrototypeSet, features, labels) -> PrototypeSet:
    """Update the prototypes of every class present in the batch.

    Initialized classes blend via :func:`update_prototype`; uninitialized ones
    adopt the normalized mini-batch mean directly. Absent classes are
    untouched, so an empty batch returns the set unchanged.
    """
    if len(np.asarray(features)) == 0:
        return pset
    means = minibatch_prototypes(features, labels)
    bad = [k for k in means if not (0 <= k < pset.class_count)]
    if bad:
        raise ValueError(f"labels {bad} outside 0..{pset.class_count - 1}")
    updates: dict[int, np.ndarray] = {}
    for class_id in sorted(means):
        mean = means[class_id]
        if float(np.linalg.norm(mean)) <= 1e-12:
            raise ZeroVector(f"mini-batch mean for class {class_id} is zero")
        if pset.is_initialized(class_id):
            updates[class_id] = update_prototype(pset.get(class_id), mean)
        else:
            updates[class_id] = l2_normalize(mean)
    return pset.with_updates(updates)
