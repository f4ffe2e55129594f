#!/usr/bin/env python3
"""
Online Semantic Clustering
Streaming K-means over full-query embeddings with cosine assignment.
Centroids are seeded from the first K distinct queries and then follow an
incremental mean.
"""

import logging
import threading
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ml_engine.embeddings import EmbeddingVector
from ml_engine.errors import InvalidInputError, NotReadyError

logger = logging.getLogger(__name__)

DISTINCT_COSINE = 0.999


@dataclass(frozen=True)
class ClusterSnapshot:
    centroids: np.ndarray
    counts: np.ndarray


class ClusterModel:
    """
    K centroids with per-centroid counts.
    Single writer: assign() reads a consistent snapshot, update() and observe()
    are serialized through one lock.
    """

    def __init__(self, k: int, d_emb: int):
        if k < 1 or d_emb < 1:
            raise InvalidInputError("k and d_emb must be positive")
        self.k = k
        self.d_emb = d_emb
        self._centroids: List[np.ndarray] = []
        self._counts: List[int] = []
        self._lock = threading.RLock()
        self._snapshot = ClusterSnapshot(np.zeros((0, d_emb)), np.zeros(0, dtype=int))

    @classmethod
    def from_centroids(cls, centroids, counts=None) -> "ClusterModel":
        centroids = np.asarray(centroids, dtype=float)
        model = cls(centroids.shape[0], centroids.shape[1])
        counts = [0] * model.k if counts is None else [int(c) for c in counts]
        with model._lock:
            model._centroids = [c.copy() for c in centroids]
            model._counts = counts
            model._publish()
        return model

    @property
    def ready(self) -> bool:
        return len(self._snapshot.counts) == self.k

    @property
    def size(self) -> int:
        return len(self._snapshot.counts)

    def snapshot(self) -> ClusterSnapshot:
        return self._snapshot

    def _publish(self):
        centroids = np.array(self._centroids) if self._centroids else np.zeros((0, self.d_emb))
        counts = np.array(self._counts, dtype=int)
        centroids.setflags(write=False)
        counts.setflags(write=False)
        self._snapshot = ClusterSnapshot(centroids, counts)

    def _check(self, e: EmbeddingVector):
        if e.dim != self.d_emb:
            raise InvalidInputError(f"embedding dimension {e.dim}, clusters expect {self.d_emb}")
        if e.norm == 0:
            raise InvalidInputError("cannot cluster the zero vector")

    def similarities(self, e: EmbeddingVector, snap: Optional[ClusterSnapshot] = None) -> np.ndarray:
        snap = snap or self._snapshot
        norms = np.linalg.norm(snap.centroids, axis=1)
        norms[norms == 0] = 1.0
        return (snap.centroids @ e.values) / (norms * e.norm)

    def assign(self, e: EmbeddingVector) -> int:
        """Index of the centroid with the highest cosine similarity."""
        self._check(e)
        snap = self._snapshot
        if len(snap.counts) == 0:
            raise NotReadyError("cluster model has no centroids yet")
        return int(np.argmax(self.similarities(e, snap)))

    def update(self, e: EmbeddingVector, c: int) -> None:
        """mu_c <- mu_c + (e - mu_c) / (N_c + 1); N_c += 1"""
        self._check(e)
        with self._lock:
            if not 0 <= c < len(self._centroids):
                raise InvalidInputError(f"cluster index {c} out of range")
            mu = self._centroids[c]
            self._centroids[c] = mu + (e.values - mu) / (self._counts[c] + 1)
            self._counts[c] += 1
            self._publish()

    def observe(self, e: EmbeddingVector, learn: bool = True) -> int:
        """
        Assign e and, when learning, fold it into its centroid.
        Until K distinct embeddings have been seen, a distinct embedding seeds
        a new centroid.
        """
        self._check(e)
        if not learn:
            return self.assign(e)
        with self._lock:
            if len(self._centroids) < self.k:
                sims = self.similarities(e) if self._centroids else np.zeros(0)
                if len(sims) == 0 or np.max(sims) < DISTINCT_COSINE:
                    self._centroids.append(np.zeros(self.d_emb))
                    self._counts.append(0)
                    c = len(self._centroids) - 1
                    self.update(e, c)
                    if len(self._centroids) == self.k:
                        logger.info(f"Cluster model initialized with {self.k} centroids")
                    return c
            c = self.assign(e)
            self.update(e, c)
            return c

    def to_dict(self) -> dict:
        snap = self._snapshot
        return {
            "k": self.k,
            "d_emb": self.d_emb,
            "centroids": snap.centroids.tolist(),
            "counts": snap.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterModel":
        """Restore a model, including one still seeding its first centroids."""
        model = cls(int(data["k"]), int(data["d_emb"]))
        if len(data["centroids"]) > model.k or len(data["counts"]) != len(data["centroids"]):
            raise InvalidInputError("cluster state has inconsistent centroids and counts")
        with model._lock:
            model._centroids = [np.asarray(c, dtype=float) for c in data["centroids"]]
            model._counts = [int(c) for c in data["counts"]]
            model._publish()
        return model


def assign_cluster(cm: ClusterModel, e: EmbeddingVector) -> int:
    return cm.assign(e)


def update_cluster(cm: ClusterModel, e: EmbeddingVector, c: int) -> ClusterModel:
    cm.update(e, c)
    return cm
