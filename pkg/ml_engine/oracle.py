#!/usr/bin/env python3
"""
Simulation Oracle
Ground-truth accuracy and energy distributions per (model, context cell).
Stands in for real inference so that regret can be computed exactly.

A context cell is the true (task, topic, complexity bin) of a query.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ml_engine.errors import InvalidInputError
from ml_engine.model_pool import ModelPool, estimate_latency
from ml_engine.query_stream import TASK_LABELS
from ml_engine.reward import (
    Observation,
    RewardParams,
    expected_reward,
    normalize_accuracy,
    normalize_energy,
)

logger = logging.getLogger(__name__)

Cell = Tuple[int, int, int]

# Relative capability of the default pool; larger means more accurate everywhere
CAPABILITY = {
    "qwen2.5-0.5b": 0.20,
    "qwen2.5-1.5b": 0.35,
    "qwen2.5-3b": 0.48,
    "qwen2.5-7b": 0.62,
    "qwen2.5-14b": 0.74,
    "mistral-7b-v0.3": 0.52,
    "gemma-3-1b": 0.28,
    "gemma-3-4b": 0.55,
    "gemma-3-12b": 0.70,
    "gemma-3-27b": 0.86,
    "llama-3.1-1b": 0.25,
    "llama-3.2-3b": 0.45,
    "llama-3.1-8b": 0.60,
    "phi-4-mini": 0.50,
    "phi-4": 0.72,
    "yi-34b": 0.76,
}

TASK_DIFFICULTY = {
    "question_answering": 0.10,
    "situation_completion": 0.05,
    "commonsense_reasoning": 0.08,
    "math_reasoning": 0.25,
    "summarization": 0.02,
}


def capability(model_id: str, params_b: float) -> float:
    if model_id in CAPABILITY:
        return CAPABILITY[model_id]
    return float(np.clip(0.3 + 0.12 * math.log2(max(params_b, 0.1)), 0.05, 0.9))


@dataclass
class OracleSpec:
    model_ids: List[str]
    task_labels: List[str]
    n_topics: int
    n_bins: int
    acc_mean: np.ndarray  # (models, tasks, topics, bins)
    energy_base_wh: np.ndarray  # (models,)
    energy_per_token_wh: np.ndarray  # (models,)
    tokens: np.ndarray  # (models, tasks)
    latency_ms: np.ndarray  # (models, tasks)
    acc_std: float = 0.05
    energy_std: float = 0.05
    acc_bounds: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    e_max: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.acc_mean = np.asarray(self.acc_mean, dtype=float)
        expected = (len(self.model_ids), len(self.task_labels), self.n_topics, self.n_bins)
        if self.acc_mean.shape != expected:
            raise InvalidInputError(f"acc_mean shape {self.acc_mean.shape}, expected {expected}")
        if self.acc_std < 0 or self.energy_std < 0:
            raise InvalidInputError("noise stds must be nonnegative")
        if np.any(np.isnan(self.acc_mean)):
            raise InvalidInputError("acc_mean has undefined entries")
        self._index = {m: i for i, m in enumerate(self.model_ids)}
        if self.e_max <= 0:
            self.e_max = float(np.max(self._energy_table()))

    # ---------------------------------------------------------------- lookup

    def model_index(self, model_id: str) -> int:
        if model_id not in self._index:
            raise InvalidInputError(f"oracle has no entry for model '{model_id}'")
        return self._index[model_id]

    def check_cell(self, cell: Cell):
        task, topic, bin_index = cell
        if not (
            0 <= task < len(self.task_labels)
            and 0 <= topic < self.n_topics
            and 0 <= bin_index < self.n_bins
        ):
            raise InvalidInputError(f"context cell {cell} is outside the oracle")

    def _energy_table(self) -> np.ndarray:
        return self.energy_base_wh[:, None] + self.energy_per_token_wh[:, None] * self.tokens

    def expected_accuracy(self, model_id: str, cell: Cell) -> float:
        self.check_cell(cell)
        return float(self.acc_mean[(self.model_index(model_id),) + tuple(cell)])

    def expected_energy_wh(self, model_id: str, task_index: int) -> float:
        i = self.model_index(model_id)
        return float(self.energy_base_wh[i] + self.energy_per_token_wh[i] * self.tokens[i, task_index])

    def expected_energy_norm(self, model_id: str, task_index: int) -> float:
        return normalize_energy(self.expected_energy_wh(model_id, task_index), self.e_max)

    def expected_reward(self, model_id: str, cell: Cell, params: RewardParams) -> float:
        return expected_reward(
            params,
            self.expected_accuracy(model_id, cell),
            self.expected_energy_norm(model_id, cell[0]),
        )

    def bounds(self, task_index: int) -> Tuple[float, float]:
        return tuple(self.acc_bounds.get(self.task_labels[task_index], (0.0, 1.0)))

    def highest_accuracy_model(self, candidates: Optional[Sequence[str]] = None) -> str:
        candidates = list(candidates or self.model_ids)
        means = [self.acc_mean[self.model_index(m)].mean() for m in candidates]
        return candidates[int(np.argmax(means))]

    # ------------------------------------------------------------- sampling

    def sample_outcome(self, model_id: str, cell: Cell, rng) -> Observation:
        """Noisy accuracy and energy for one query; latency is the pool estimate."""
        mu = self.expected_accuracy(model_id, cell)
        i = self.model_index(model_id)
        task = cell[0]
        raw = min(1.0, max(0.0, mu + self.acc_std * rng.standard_normal()))
        mean_wh = self.expected_energy_wh(model_id, task)
        wh = max(0.0, mean_wh * (1.0 + self.energy_std * rng.standard_normal()))
        return Observation(
            accuracy_raw=raw,
            accuracy_norm=normalize_accuracy(raw, self.bounds(task)),
            energy_wh=wh,
            energy_norm=normalize_energy(wh, self.e_max),
            latency_ms=float(self.latency_ms[i, task]),
        )

    def optimal_arm(
        self, cell: Cell, feasible: Sequence[str], params: RewardParams
    ) -> Tuple[str, float]:
        """Brute-force argmax of expected reward; ties go to the earliest arm."""
        best_arm, best_reward = None, -math.inf
        for model_id in feasible:
            r = self.expected_reward(model_id, cell, params)
            if r > best_reward:
                best_arm, best_reward = model_id, r
        if best_arm is None:
            raise InvalidInputError("feasible set is empty")
        return best_arm, best_reward

    # -------------------------------------------------------------- variants

    def with_dominant_model(self, model_id: str, margin: float = 0.1) -> "OracleSpec":
        """Copy where model_id beats every other model on accuracy and energy in every cell."""
        spec = copy.deepcopy(self)
        i = spec.model_index(model_id)
        others = [j for j in range(len(spec.model_ids)) if j != i]
        spec.acc_mean[i] = np.minimum(1.0, spec.acc_mean[others].max(axis=0) + margin)
        spec.energy_base_wh[i] = spec.energy_base_wh[others].min() * 0.5
        spec.energy_per_token_wh[i] = spec.energy_per_token_wh[others].min() * 0.5
        return spec

    # ----------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return {
            "model_ids": self.model_ids,
            "task_labels": self.task_labels,
            "n_topics": self.n_topics,
            "n_bins": self.n_bins,
            "acc_mean": self.acc_mean.tolist(),
            "energy_base_wh": self.energy_base_wh.tolist(),
            "energy_per_token_wh": self.energy_per_token_wh.tolist(),
            "tokens": self.tokens.tolist(),
            "latency_ms": self.latency_ms.tolist(),
            "acc_std": self.acc_std,
            "energy_std": self.energy_std,
            "acc_bounds": {k: list(v) for k, v in self.acc_bounds.items()},
            "e_max": self.e_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OracleSpec":
        return cls(
            model_ids=list(data["model_ids"]),
            task_labels=list(data["task_labels"]),
            n_topics=int(data["n_topics"]),
            n_bins=int(data["n_bins"]),
            acc_mean=np.array(data["acc_mean"], dtype=float),
            energy_base_wh=np.array(data["energy_base_wh"], dtype=float),
            energy_per_token_wh=np.array(data["energy_per_token_wh"], dtype=float),
            tokens=np.array(data["tokens"], dtype=float),
            latency_ms=np.array(data["latency_ms"], dtype=float),
            acc_std=float(data.get("acc_std", 0.05)),
            energy_std=float(data.get("energy_std", 0.05)),
            acc_bounds={k: tuple(v) for k, v in data.get("acc_bounds", {}).items()},
            e_max=float(data.get("e_max", 0.0)),
            seed=int(data.get("seed", 0)),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        logger.info(f"Oracle saved to {path}")

    @classmethod
    def load(cls, path) -> "OracleSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _profiles(pool: ModelPool, task_labels: Sequence[str]):
    entries = pool.entries
    tokens = np.array([[m.token_budget(t) for t in task_labels] for m in entries], dtype=float)
    latency = np.array([[estimate_latency(m, t) for t in task_labels] for m in entries])
    base = np.array([m.energy_base_wh for m in entries], dtype=float)
    per_token = np.array([m.energy_per_token_wh for m in entries], dtype=float)
    return [m.id for m in entries], tokens, latency, base, per_token


def build_default_oracle(
    pool: ModelPool,
    task_labels: Optional[Sequence[str]] = None,
    n_topics: int = 3,
    n_bins: int = 3,
    acc_std: float = 0.05,
    energy_std: float = 0.05,
    seed: int = 0,
) -> OracleSpec:
    """
    Accuracy = 0.15 + 0.75c - (task difficulty + bin penalty)(1 - c) + topic affinity,
    where c is the model's capability. Energy follows the pool's profile.
    """
    labels = list(task_labels or TASK_LABELS)
    ids, tokens, latency, base, per_token = _profiles(pool, labels)
    rng = np.random.default_rng(seed)
    caps = np.array([capability(m.id, m.params_b) for m in pool.entries])
    difficulty = np.array([TASK_DIFFICULTY.get(t, 0.1) for t in labels])
    bin_penalty = (
        0.10 * (1 - np.arange(n_bins) / (n_bins - 1)) if n_bins > 1 else np.zeros(1)
    )
    affinity = rng.uniform(-0.02, 0.02, size=(len(ids), n_topics))

    c = caps[:, None, None, None]
    acc = (
        0.15
        + 0.75 * c
        - (difficulty[None, :, None, None] + bin_penalty[None, None, None, :]) * (1 - c)
        + affinity[:, None, :, None]
    )
    acc = np.clip(np.broadcast_to(acc, (len(ids), len(labels), n_topics, n_bins)), 0.0, 1.0)
    return OracleSpec(
        model_ids=ids,
        task_labels=labels,
        n_topics=n_topics,
        n_bins=n_bins,
        acc_mean=acc.copy(),
        energy_base_wh=base,
        energy_per_token_wh=per_token,
        tokens=tokens,
        latency_ms=latency,
        acc_std=acc_std,
        energy_std=energy_std,
        seed=seed,
    )


def task_separable_oracle(
    pool: ModelPool,
    task_labels: Optional[Sequence[str]] = None,
    n_topics: int = 3,
    n_bins: int = 3,
    acc_std: float = 0.05,
    seed: int = 0,
) -> OracleSpec:
    """Each task has its own specialist model; topic and complexity carry no signal."""
    labels = list(task_labels or TASK_LABELS)
    ids, tokens, latency, base, per_token = _profiles(pool, labels)
    n_models = len(ids)
    specialists = [(k * n_models) // len(labels) for k in range(len(labels))]
    acc = np.empty((n_models, len(labels), n_topics, n_bins))
    for m in range(n_models):
        acc[m] = 0.30 + 0.01 * (m % 5)
    for task, m in enumerate(specialists):
        acc[m, task] = 0.85
    # Flat energy so only accuracy separates arms
    flat_base = np.full(n_models, base.min())
    flat_token = np.full(n_models, per_token.min())
    return OracleSpec(
        model_ids=ids,
        task_labels=labels,
        n_topics=n_topics,
        n_bins=n_bins,
        acc_mean=acc,
        energy_base_wh=flat_base,
        energy_per_token_wh=flat_token,
        tokens=tokens,
        latency_ms=latency,
        acc_std=acc_std,
        energy_std=0.0,
        seed=seed,
    )


def context_free_oracle(
    pool: ModelPool,
    task_labels: Optional[Sequence[str]] = None,
    n_topics: int = 3,
    n_bins: int = 3,
    acc_std: float = 0.05,
    seed: int = 0,
) -> OracleSpec:
    """Reward depends on the model only, so the optimum is the same for every query."""
    labels = list(task_labels or TASK_LABELS)
    ids, tokens, latency, base, _ = _profiles(pool, labels)
    caps = np.array([capability(m.id, m.params_b) for m in pool.entries])
    acc = np.broadcast_to(
        (0.15 + 0.75 * caps)[:, None, None, None], (len(ids), len(labels), n_topics, n_bins)
    ).copy()
    return OracleSpec(
        model_ids=ids,
        task_labels=labels,
        n_topics=n_topics,
        n_bins=n_bins,
        acc_mean=acc,
        energy_base_wh=base * 10,
        energy_per_token_wh=np.zeros(len(ids)),
        tokens=tokens,
        latency_ms=latency,
        acc_std=acc_std,
        seed=seed,
    )
