#!/usr/bin/env python3
"""
Reward and Regret
Normalized accuracy and energy, the lambda-weighted scalar reward, and
instantaneous / cumulative / moving-average regret bookkeeping.
"""

import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from itertools import accumulate
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ml_engine.errors import InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 50
LEDGER_COLUMNS = [
    "step",
    "arm_id",
    "reward",
    "optimal_reward",
    "regret",
    "cumulative_regret",
    "moving_avg",
]


@dataclass(frozen=True)
class RewardParams:
    """lam = 0 routes for accuracy only, lam = 1 for energy only."""

    lam: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError(f"lambda must be in [0, 1], got {self.lam}")

    @property
    def alpha_weight(self) -> float:
        return 1.0 - self.lam

    @property
    def beta_weight(self) -> float:
        return self.lam


@dataclass(frozen=True)
class Observation:
    accuracy_raw: float
    accuracy_norm: float
    energy_wh: float
    energy_norm: float
    latency_ms: float


def normalize_accuracy(raw: float, bounds: Tuple[float, float]) -> float:
    acc_min, acc_max = bounds
    if not acc_max > acc_min:
        raise InvalidInputError(f"degenerate accuracy bounds {bounds}")
    return min(1.0, max(0.0, (raw - acc_min) / (acc_max - acc_min)))


def normalize_energy(wh: float, e_max: float) -> float:
    if not e_max > 0:
        raise InvalidInputError(f"e_max must be positive, got {e_max}")
    return min(wh / e_max, 1.0)


def reward(params: RewardParams, obs: Observation) -> float:
    """r = (1 - lam) * accuracy_norm - lam * energy_norm"""
    return params.alpha_weight * obs.accuracy_norm - params.beta_weight * obs.energy_norm


def expected_reward(params: RewardParams, accuracy: float, energy_norm: float) -> float:
    return params.alpha_weight * accuracy - params.beta_weight * energy_norm


def instantaneous_regret(chosen_reward: float, feasible_rewards: Dict[str, float]) -> float:
    """Gap between the best feasible reward and the chosen one."""
    if not feasible_rewards:
        raise InvalidInputError("feasible reward table is empty")
    return max(0.0, max(feasible_rewards.values()) - chosen_reward)


@dataclass
class DecisionRecord:
    """One routing step, shared by simulation ledgers and the service log."""

    step: int
    query_id: str
    arm_id: str
    context: List[float]
    task: str
    cluster: int
    complexity_bin: int
    accuracy_norm: Optional[float] = None
    energy_wh: Optional[float] = None
    energy_norm: Optional[float] = None
    latency_ms: Optional[float] = None
    reward: Optional[float] = None
    lam: float = 0.4
    optimal_arm: Optional[str] = None
    optimal_reward: Optional[float] = None
    chosen_expected_reward: Optional[float] = None
    regret: Optional[float] = None
    realized_regret: Optional[float] = None
    exploration: bool = False
    feasible: List[str] = field(default_factory=list)
    cell: Optional[List[int]] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DecisionRecord":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in data.items() if k in known})


class RegretLedger:
    """Append-only per-step regret records. Single writer, snapshot readers."""

    def __init__(self, window: int = DEFAULT_WINDOW):
        if window < 1:
            raise InvalidInputError("moving-average window must be >= 1")
        self.window = window
        self._rows: List[Tuple[int, str, float, float, float]] = []
        self._cumulative = 0.0
        self._lock = threading.Lock()

    def append(self, step: int, arm_id: str, chosen_reward: float, optimal_reward: float):
        delta = optimal_reward - chosen_reward
        if delta < 0:
            if delta < -1e-12:
                raise InvalidInputError(
                    f"chosen reward {chosen_reward} exceeds optimum {optimal_reward}"
                )
            delta = 0.0
        with self._lock:
            self._rows.append((step, arm_id, chosen_reward, optimal_reward, delta))
            self._cumulative += delta
        return delta

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def regrets(self) -> List[float]:
        return [row[4] for row in list(self._rows)]

    @property
    def cumulative(self) -> float:
        return self._cumulative

    def to_dataframe(self) -> pd.DataFrame:
        rows = list(self._rows)
        df = pd.DataFrame(rows, columns=["step", "arm_id", "reward", "optimal_reward", "regret"])
        cumulative, moving = ledger_metrics(df["regret"].tolist(), self.window)
        df["cumulative_regret"] = cumulative
        df["moving_avg"] = moving
        return df[LEDGER_COLUMNS]

    def export_csv(self, path):
        self.to_dataframe().to_csv(path, index=False)
        logger.info(f"Regret ledger ({len(self)} steps) written to {path}")


def ledger_metrics(ledger, window: int = DEFAULT_WINDOW) -> Tuple[List[float], List[float]]:
    """Prefix sums and trailing min(window, t) averages of the regret series."""
    regrets = ledger.regrets if isinstance(ledger, RegretLedger) else list(ledger)
    if isinstance(ledger, RegretLedger):
        window = ledger.window
    cumulative = list(accumulate(regrets))
    moving = pd.Series(regrets, dtype=float).rolling(window, min_periods=1).mean().tolist()
    return cumulative, moving


def confidence_interval(values: Sequence[float], z: float = 1.96) -> Tuple[float, float, float]:
    """Mean, sample std and normal-approximation half-width."""
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return math.nan, math.nan, math.nan
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std, z * std / math.sqrt(len(arr))


def summarize_runs(df: pd.DataFrame, by: Sequence[str], metrics: Sequence[str]) -> pd.DataFrame:
    """Mean, std and 95% CI half-width of each metric across repetitions."""
    rows = []
    for key, group in df.groupby(list(by), sort=True):
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(by, key))
        row["reps"] = len(group)
        for metric in metrics:
            mean, std, half = confidence_interval(group[metric])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_std"] = std
            row[f"{metric}_ci95"] = half
        rows.append(row)
    return pd.DataFrame(rows)
