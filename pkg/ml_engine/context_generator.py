#!/usr/bin/env python3
"""
Query Context Generator
Combines task type, semantic cluster and complexity bin into the one-hot
context vector the routing policies consume.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ml_engine.complexity import ComplexityBinner, flesch_breakdown
from ml_engine.embeddings import EmbeddingProvider
from ml_engine.errors import InvalidInputError, RouterError, StageError
from ml_engine.semantic_clustering import ClusterModel
from ml_engine.task_classifier import TaskClassifier, extract_instruction

logger = logging.getLogger(__name__)

BLOCKS = ("task", "cluster", "complexity")

FEATURE_CONFIGS: Dict[str, Tuple[str, ...]] = {
    "none": (),
    "task": ("task",),
    "cluster": ("cluster",),
    "complexity": ("complexity",),
    "task+cluster": ("task", "cluster"),
    "task+complexity": ("task", "complexity"),
    "cluster+complexity": ("cluster", "complexity"),
    "full": BLOCKS,
}
PAIRS = ["task+cluster", "task+complexity", "cluster+complexity"]


@dataclass(frozen=True)
class FeatureConfig:
    """Which feature blocks enter the context vector. Bias is always last."""

    blocks: Tuple[str, ...] = BLOCKS

    def __post_init__(self):
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown:
            raise InvalidInputError(f"unknown feature blocks: {sorted(unknown)}")
        # Canonical order keeps the layout stable
        object.__setattr__(self, "blocks", tuple(b for b in BLOCKS if b in self.blocks))

    @classmethod
    def named(cls, name: Optional[str]) -> "FeatureConfig":
        if name is None:
            return cls(())
        if name not in FEATURE_CONFIGS:
            raise InvalidInputError(f"unknown feature config '{name}'")
        return cls(FEATURE_CONFIGS[name])

    @property
    def name(self) -> str:
        for name, blocks in FEATURE_CONFIGS.items():
            if blocks == self.blocks:
                return name
        return "+".join(self.blocks)

    def dimension(self, dims: Tuple[int, int, int]) -> int:
        sizes = dict(zip(BLOCKS, dims))
        return sum(sizes[b] for b in self.blocks) + 1


@dataclass(frozen=True, eq=False)
class ContextVector:
    values: np.ndarray

    @property
    def d(self) -> int:
        return int(self.values.shape[0])


def build_context(
    label: int,
    cluster: int,
    bin_index: int,
    dims: Tuple[int, int, int],
    features: Optional[FeatureConfig] = None,
) -> ContextVector:
    """[onehot(label) | onehot(cluster) | onehot(bin) | 1] restricted to the configured blocks."""
    features = features or FeatureConfig()
    indices = dict(zip(BLOCKS, (label, cluster, bin_index)))
    sizes = dict(zip(BLOCKS, dims))
    for block in BLOCKS:
        if sizes[block] < 1:
            raise InvalidInputError(f"{block} block size must be positive")
        if not 0 <= indices[block] < sizes[block]:
            raise InvalidInputError(f"{block} index {indices[block]} outside [0, {sizes[block]})")

    parts = []
    for block in features.blocks:
        onehot = np.zeros(sizes[block])
        onehot[indices[block]] = 1.0
        parts.append(onehot)
    parts.append(np.ones(1))
    values = np.concatenate(parts)
    values.setflags(write=False)
    return ContextVector(values)


@dataclass
class ContextResult:
    vector: ContextVector
    task: str
    task_index: int
    task_probabilities: np.ndarray
    cluster: int
    flesch: float
    flesch_raw: float
    complexity_bin: int
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def breakdown(self) -> dict:
        return {
            "task": self.task,
            "cluster": self.cluster,
            "complexity_bin": self.complexity_bin,
            "flesch": round(self.flesch, 4),
        }


class ContextPipeline:
    """Embedding provider, task classifier, cluster model and binner wired together."""

    def __init__(
        self,
        provider: EmbeddingProvider,
        classifier: TaskClassifier,
        clusters: ClusterModel,
        binner: ComplexityBinner,
        features: Optional[FeatureConfig] = None,
    ):
        if classifier.d_emb != provider.d_emb or clusters.d_emb != provider.d_emb:
            raise InvalidInputError("provider, classifier and clusters disagree on d_emb")
        self.provider = provider
        self.classifier = classifier
        self.clusters = clusters
        self.binner = binner
        self.features = features or FeatureConfig()

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (len(self.classifier.labels), self.clusters.k, self.binner.n_bins)

    @property
    def d(self) -> int:
        return self.features.dimension(self.dims)

    def generate_context(self, text: str, update_clusters: bool = True) -> ContextResult:
        timings: Dict[str, float] = {}

        def stage(name, fn, *args):
            start = time.perf_counter()
            try:
                return fn(*args)
            except RouterError as e:
                raise StageError(name, e) from e
            finally:
                timings[name] = (time.perf_counter() - start) * 1000

        e_instr = stage("embed_instruction", self.provider.embed, extract_instruction(text))
        label, probs = stage("task_classification", self.classifier.classify, e_instr)
        e_full = stage("embed_full", self.provider.embed, text)
        cluster = stage("cluster_assignment", self.clusters.observe, e_full, update_clusters)
        flesch = stage("complexity", flesch_breakdown, text)
        bin_index = stage("complexity_bin", self.binner.bin, flesch.score)
        task_index = self.classifier.label_index(label)
        vector = stage(
            "context_build", build_context, task_index, cluster, bin_index, self.dims, self.features
        )
        return ContextResult(
            vector=vector,
            task=label,
            task_index=task_index,
            task_probabilities=probs,
            cluster=cluster,
            flesch=flesch.score,
            flesch_raw=flesch.raw,
            complexity_bin=bin_index,
            timings_ms=timings,
        )


def generate_context(text: str, pipeline: ContextPipeline, update_clusters: bool = True):
    return pipeline.generate_context(text, update_clusters=update_clusters)


def expand_feature_configs(names: Sequence[str]) -> list:
    """Expand 'pairs' and drop duplicates, keeping first occurrence order."""
    expanded = []
    for name in names:
        expanded.extend(PAIRS if name == "pairs" else [name])
    unique = list(dict.fromkeys(expanded))
    if len(unique) != len(expanded):
        logger.warning(f"Duplicate feature configs removed: {expanded} -> {unique}")
    for name in unique:
        FeatureConfig.named(name)
    return unique
