"""Prototype computation and the open-set distance classifier."""

from dataclasses import dataclass

import numpy as np


class ProtoError(ValueError):
    pass


@dataclass
class Prototype:
    vector: np.ndarray
    class_id: str
    k_used: int

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1 or not np.all(np.isfinite(self.vector)):
            raise ProtoError("prototype must be a finite 1-D vector")


@dataclass
class OpenSetDecision:
    predicted: str  # class_id or "unknown"
    distance: float
    gamma_used: float


def euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ProtoError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def compute_prototype(embeddings, class_id: str) -> Prototype:
    """Arithmetic mean of the enrollment embeddings."""
    if len(embeddings) == 0:
        raise ProtoError("cannot compute a prototype from an empty list")
    embs = np.asarray(embeddings, dtype=np.float64)
    if embs.ndim != 2:
        raise ProtoError("embeddings must share one dimension")
    return Prototype(vector=embs.mean(axis=0), class_id=class_id, k_used=len(embeddings))


def classify_open_set(embedding, prototypes, gamma: float) -> OpenSetDecision:
    """Nearest prototype if strictly inside the score threshold, else unknown.

    Ties between equidistant prototypes resolve to the lexicographically
    smallest class_id.
    """
    if not prototypes:
        raise ProtoError("no prototypes")
    if not gamma > 0:
        raise ProtoError("gamma must be positive")
    best = min(prototypes, key=lambda p: (euclidean(embedding, p.vector), p.class_id))
    dist = euclidean(embedding, best.vector)
    predicted = best.class_id if dist < gamma else "unknown"
    return OpenSetDecision(predicted=predicted, distance=dist, gamma_used=gamma)
