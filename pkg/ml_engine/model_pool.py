#!/usr/bin/env python3
"""
Model Pool
Registry of candidate models with latency and energy profiles.
Filters the pool down to the models that fit a request's latency budget and
announces churn so routing policies can mirror it.
"""

import json
import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator

from ml_engine.errors import InvalidInputError, NoFeasibleArmError

logger = logging.getLogger(__name__)

DEFAULT_POOL_PATH = Path(__file__).resolve().parent.parent / "data" / "model_pool.json"


class ModelEntry(BaseModel):
    """Profile of one candidate model; `max_new_tokens` is the per-task token budget."""

    model_config = ConfigDict(validate_assignment=True)

    id: str = Field(..., min_length=1)
    family: str
    params_b: float = Field(..., gt=0)
    tokens_per_sec: float = Field(..., gt=0)
    max_new_tokens: Dict[str, PositiveInt]
    energy_per_token_wh: float = Field(..., ge=0)
    energy_base_wh: float = Field(0.0, ge=0)
    active: bool = True

    @field_validator("max_new_tokens")
    @classmethod
    def _has_tasks(cls, value: Dict[str, int]) -> Dict[str, int]:
        if not value:
            raise ValueError("max_new_tokens is empty")
        return value

    def serves(self, task: str) -> bool:
        return task in self.max_new_tokens

    def query_energy_wh(self, task: str) -> float:
        """Profiled energy of one query of this task type."""
        return self.energy_base_wh + self.energy_per_token_wh * self.token_budget(task)

    def token_budget(self, task: str) -> int:
        if task not in self.max_new_tokens:
            raise InvalidInputError(f"{self.id}: no token budget for task '{task}'")
        return self.max_new_tokens[task]

    def to_dict(self) -> dict:
        return self.model_dump()

    @classmethod
    def from_dict(cls, data: dict) -> "ModelEntry":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise InvalidInputError(f"malformed model entry: {e}") from e


@dataclass(frozen=True)
class FeasibilityQuery:
    task: str
    l_max_ms: float = math.inf

    def __post_init__(self):
        if not self.l_max_ms > 0:
            raise InvalidInputError("L_max must be positive")


@dataclass(frozen=True)
class PoolEvent:
    kind: str  # "add" | "deactivate"
    model_id: str


def estimate_latency(m: ModelEntry, task: str) -> float:
    """Conservative latency: task token budget at the model's throughput, in ms."""
    return m.token_budget(task) / m.tokens_per_sec * 1000.0


class ModelPool:
    """Concurrent reads, serialized churn. Listeners run inside the churn lock."""

    def __init__(self, entries: Optional[List[ModelEntry]] = None):
        self._entries: Dict[str, ModelEntry] = {}
        self._lock = threading.RLock()
        self._listeners: List[Callable[[PoolEvent], None]] = []
        for entry in entries or []:
            if entry.id in self._entries:
                raise InvalidInputError(f"duplicate model id '{entry.id}'")
            self._entries[entry.id] = entry

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    def subscribe(self, listener: Callable[[PoolEvent], None]):
        self._listeners.append(listener)

    def get(self, model_id: str) -> ModelEntry:
        if model_id not in self._entries:
            raise InvalidInputError(f"unknown model '{model_id}'")
        return self._entries[model_id]

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[ModelEntry]:
        return list(self._entries.values())

    def active_ids(self) -> List[str]:
        return [m.id for m in self._entries.values() if m.active]

    def active_entries(self) -> List[ModelEntry]:
        return [m for m in self._entries.values() if m.active]

    def tasks(self) -> List[str]:
        tasks: Dict[str, None] = {}
        for m in self._entries.values():
            tasks.update(dict.fromkeys(m.max_new_tokens))
        return list(tasks)

    def max_query_energy(self) -> float:
        """Largest profiled per-query energy over active models and their tasks."""
        values = [m.query_energy_wh(t) for m in self.active_entries() for t in m.max_new_tokens]
        if not values or max(values) <= 0:
            raise InvalidInputError("pool has no energy profile to normalize against")
        return max(values)

    def feasible_set(self, fq: FeasibilityQuery, overhead_ms: float = 0.0) -> List[str]:
        """
        Active models with overhead + estimated latency within L_max, in pool
        order. Models without a token budget for the task never qualify. Falls
        back to the single fastest serving model when none fit.
        """
        with self._lock:
            active = self.active_entries()
        if not active:
            raise NoFeasibleArmError("no active models in the pool")
        serving = [m for m in active if m.serves(fq.task)]
        if not serving:
            raise NoFeasibleArmError(f"no active model has a token budget for task '{fq.task}'")
        latencies = {m.id: estimate_latency(m, fq.task) for m in serving}
        feasible = [mid for mid, lat in latencies.items() if overhead_ms + lat <= fq.l_max_ms]
        if feasible:
            return feasible
        fallback = min(latencies, key=lambda mid: latencies[mid])
        logger.debug(f"No model fits {fq.l_max_ms} ms for '{fq.task}', falling back to {fallback}")
        return [fallback]

    def add_model(self, entry: ModelEntry) -> PoolEvent:
        with self._lock:
            existing = self._entries.get(entry.id)
            if existing is not None and existing.active:
                raise InvalidInputError(f"model '{entry.id}' already in pool")
            entry.active = True
            event = PoolEvent("add", entry.id)
            for listener in self._listeners:
                listener(event)
            self._entries[entry.id] = entry
        logger.info(f"Model {entry.id} added to pool ({len(self.active_ids())} active)")
        return event

    def deactivate_model(self, model_id: str) -> PoolEvent:
        with self._lock:
            entry = self._entries.get(model_id)
            if entry is None or not entry.active:
                raise InvalidInputError(f"model '{model_id}' is not an active pool member")
            event = PoolEvent("deactivate", model_id)
            for listener in self._listeners:
                listener(event)
            entry.active = False
        logger.info(f"Model {model_id} deactivated ({len(self.active_ids())} active)")
        return event

    def subset(self, model_ids: List[str]) -> "ModelPool":
        return ModelPool([ModelEntry.from_dict(self.get(mid).to_dict()) for mid in model_ids])

    def copy(self) -> "ModelPool":
        return ModelPool([ModelEntry.from_dict(m.to_dict()) for m in self._entries.values()])

    def to_list(self) -> List[dict]:
        return [m.to_dict() for m in self._entries.values()]

    def save(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_list(), f, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "ModelPool":
        path = Path(path) if path else DEFAULT_POOL_PATH
        with open(path) as f:
            rows = json.load(f)
        if not isinstance(rows, list):
            raise InvalidInputError(f"{path}: pool file must be a JSON array")
        pool = cls([ModelEntry.from_dict(row) for row in rows])
        logger.info(f"Loaded {len(pool)} models from {path}")
        return pool


def feasible_set(pool: ModelPool, fq: FeasibilityQuery, overhead_ms: float = 0.0) -> List[str]:
    return pool.feasible_set(fq, overhead_ms)


def add_model(pool: ModelPool, entry: ModelEntry) -> PoolEvent:
    return pool.add_model(entry)


def deactivate_model(pool: ModelPool, model_id: str) -> PoolEvent:
    return pool.deactivate_model(model_id)


def default_pool() -> ModelPool:
    return ModelPool.load(DEFAULT_POOL_PATH)

