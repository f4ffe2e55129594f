#!/usr/bin/env python3
"""
Routing Policies
Contextual bandits that pick one model (arm) per query:
- LinUCB with disjoint per-arm ridge models
- Decaying epsilon-greedy, context-free and contextual
- Contextual Thompson sampling with a Gaussian posterior

Arms can be added and removed at runtime. Policies checkpoint to JSON.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from ml_engine.errors import InvalidInputError, NoFeasibleArmError

logger = logging.getLogger(__name__)

REFRESH_EVERY = 1000

PolicyKind = Literal["linucb", "eps_greedy", "eps_greedy_contextual", "thompson"]


class PolicyConfig(BaseModel):
    kind: PolicyKind = "linucb"
    alpha_ucb: float = Field(0.1, ge=0)
    lambda_reg: float = Field(0.05, gt=0)
    eps0: float = Field(1.0, gt=0, le=1)
    decay: float = Field(0.98, gt=0, le=1)
    eps_min: float = Field(0.01, gt=0, le=1)
    sigma: float = Field(0.01, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _eps_order(self):
        if self.eps_min > self.eps0:
            raise ValueError("eps_min must not exceed eps0")
        return self


@dataclass
class ArmState:
    """Ridge statistics for one arm: A = lambda_reg*I + sum x x^T, b = sum r x."""

    arm_id: str
    index: int
    A: np.ndarray
    b: np.ndarray
    A_inv: np.ndarray
    pulls: int = 0
    reward_sum: float = 0.0
    since_refresh: int = 0

    @classmethod
    def fresh(cls, arm_id: str, index: int, d: int, lambda_reg: float) -> "ArmState":
        return cls(
            arm_id=arm_id,
            index=index,
            A=lambda_reg * np.eye(d),
            b=np.zeros(d),
            A_inv=np.eye(d) / lambda_reg,
        )

    @property
    def theta(self) -> np.ndarray:
        return self.A_inv @ self.b

    @property
    def mean_reward(self) -> float:
        return self.reward_sum / self.pulls if self.pulls else 0.0

    def apply(self, x: np.ndarray, r: float):
        self.A += np.outer(x, x)
        self.b += r * x
        self.pulls += 1
        self.reward_sum += r
        self.since_refresh += 1
        if self.since_refresh >= REFRESH_EVERY:
            self.A_inv = np.linalg.inv(self.A)
            self.since_refresh = 0
        else:
            # Sherman-Morrison rank-1 inverse update
            u = self.A_inv @ x
            self.A_inv = self.A_inv - np.outer(u, u) / (1.0 + x @ u)


@dataclass
class Selection:
    arm_id: str
    score: float
    exploration: bool
    scores: Dict[str, float] = field(default_factory=dict)


class BanditPolicy:
    """One routing policy over a dynamic set of arms. Single writer."""

    def __init__(self, config: PolicyConfig, arms: Sequence[str], d: int):
        if d < 1:
            raise InvalidInputError(f"context dimension must be >= 1, got {d}")
        arms = list(arms)
        if len(set(arms)) != len(arms):
            raise InvalidInputError("duplicate arm ids")
        self.config = config
        self.kind = config.kind
        self.d = d
        self.t = 0
        self.rng = np.random.default_rng(config.seed)
        self.arms: Dict[str, ArmState] = {}
        self.archived: Dict[str, List[ArmState]] = {}
        self._next_index = 0
        for arm_id in arms:
            self.add_arm(arm_id)

    # ------------------------------------------------------------------ arms

    @property
    def arm_ids(self) -> List[str]:
        return list(self.arms)

    def add_arm(self, arm_id: str) -> ArmState:
        if arm_id in self.arms:
            raise InvalidInputError(f"arm '{arm_id}' already registered")
        state = ArmState.fresh(arm_id, self._next_index, self.d, self.config.lambda_reg)
        self._next_index += 1
        self.arms[arm_id] = state
        return state

    def remove_arm(self, arm_id: str) -> ArmState:
        if arm_id not in self.arms:
            raise InvalidInputError(f"arm '{arm_id}' is not registered")
        state = self.arms.pop(arm_id)
        self.archived.setdefault(arm_id, []).append(state)
        return state

    def total_pulls(self, include_archived: bool = True) -> int:
        pulls = sum(s.pulls for s in self.arms.values())
        if include_archived:
            pulls += sum(s.pulls for states in self.archived.values() for s in states)
        return pulls

    # ------------------------------------------------------------- selection

    def _context(self, x) -> np.ndarray:
        values = np.asarray(getattr(x, "values", x), dtype=float)
        if values.shape != (self.d,):
            raise InvalidInputError(f"context has shape {values.shape}, policy expects ({self.d},)")
        return values

    def _candidates(self, feasible: Iterable[str]) -> List[ArmState]:
        feasible = list(dict.fromkeys(feasible))
        if not feasible:
            raise NoFeasibleArmError("feasible set is empty")
        unknown = [a for a in feasible if a not in self.arms]
        if unknown:
            raise InvalidInputError(f"feasible set contains unregistered arms: {unknown}")
        return sorted((self.arms[a] for a in feasible), key=lambda s: s.index)

    def epsilon(self, t: Optional[int] = None) -> float:
        t = self.t if t is None else t
        return max(self.config.eps_min, self.config.eps0 * self.config.decay**t)

    def select(self, x, feasible: Iterable[str]) -> Selection:
        if self.kind == "linucb":
            return self.select_linucb(x, feasible)
        if self.kind == "thompson":
            return self.select_thompson(x, feasible)
        return self.select_eps_greedy(x, feasible)

    def select_linucb(self, x, feasible: Iterable[str]) -> Selection:
        """argmax theta^T x + alpha * sqrt(x^T A^-1 x); ties to the lowest index."""
        x = self._context(x)
        candidates = self._candidates(feasible)
        means = np.array([s.theta @ x for s in candidates])
        widths = np.array([math.sqrt(max(0.0, x @ s.A_inv @ x)) for s in candidates])
        ucb = means + self.config.alpha_ucb * widths
        best = int(np.argmax(ucb))
        self.t += 1
        return Selection(
            arm_id=candidates[best].arm_id,
            score=float(ucb[best]),
            exploration=best != int(np.argmax(means)),
            scores={s.arm_id: float(v) for s, v in zip(candidates, ucb)},
        )

    def select_eps_greedy(self, x, feasible: Iterable[str]) -> Selection:
        candidates = self._candidates(feasible)
        if self.kind == "eps_greedy_contextual":
            x = self._context(x)
            estimates = np.array([s.theta @ x for s in candidates])
        else:
            estimates = np.array([s.mean_reward for s in candidates])

        eps = self.epsilon()
        self.t += 1
        if self.rng.random() < eps:
            pick = int(self.rng.integers(len(candidates)))
            explored = True
        else:
            pick = int(np.argmax(estimates))
            explored = False
        return Selection(
            arm_id=candidates[pick].arm_id,
            score=float(estimates[pick]),
            exploration=explored,
            scores={s.arm_id: float(v) for s, v in zip(candidates, estimates)},
        )

    def select_thompson(self, x, feasible: Iterable[str]) -> Selection:
        """Sample theta ~ N(theta_hat, sigma^2 A^-1) per arm, pick argmax theta^T x."""
        x = self._context(x)
        candidates = self._candidates(feasible)
        sigma = self.config.sigma
        samples = np.empty(len(candidates))
        means = np.empty(len(candidates))
        for i, s in enumerate(candidates):
            cov = (s.A_inv + s.A_inv.T) / 2
            chol = np.linalg.cholesky(cov)
            theta_hat = s.theta
            theta = theta_hat + sigma * (chol @ self.rng.standard_normal(self.d))
            samples[i] = theta @ x
            means[i] = theta_hat @ x
        best = int(np.argmax(samples))
        self.t += 1
        return Selection(
            arm_id=candidates[best].arm_id,
            score=float(samples[best]),
            exploration=best != int(np.argmax(means)),
            scores={s.arm_id: float(v) for s, v in zip(candidates, samples)},
        )

    # ---------------------------------------------------------------- update

    def update(self, arm_id: str, x, r: float, allow_archived: bool = False) -> ArmState:
        """A += x x^T, b += r x on the arm that served the query."""
        if r is None or not math.isfinite(r):
            raise InvalidInputError(f"reward must be finite, got {r}")
        x = self._context(x)
        if arm_id in self.arms:
            state = self.arms[arm_id]
        elif allow_archived and self.archived.get(arm_id):
            state = self.archived[arm_id][-1]
        else:
            raise InvalidInputError(f"arm '{arm_id}' is not registered")
        state.apply(x, float(r))
        return state

    def theta(self, arm_id: str) -> np.ndarray:
        if arm_id not in self.arms:
            raise InvalidInputError(f"arm '{arm_id}' is not registered")
        return self.arms[arm_id].theta

    def diagnostics(self) -> Dict[str, dict]:
        return {
            arm_id: {
                "pulls": s.pulls,
                "mean_reward": s.mean_reward,
                "theta_norm": float(np.linalg.norm(s.theta)),
                "theta": s.theta.tolist(),
            }
            for arm_id, s in self.arms.items()
        }

    # ----------------------------------------------------------- persistence

    @staticmethod
    def _arm_to_dict(s: ArmState) -> dict:
        return {
            "id": s.arm_id,
            "A": s.A.ravel().tolist(),
            "b": s.b.tolist(),
            "pulls": s.pulls,
            "reward_sum": s.reward_sum,
            "index": s.index,
        }

    def _arm_from_dict(self, row: dict) -> ArmState:
        A = np.array(row["A"], dtype=float).reshape(self.d, self.d)
        return ArmState(
            arm_id=row["id"],
            index=int(row.get("index", 0)),
            A=A,
            b=np.array(row["b"], dtype=float),
            A_inv=np.linalg.inv(A),
            pulls=int(row["pulls"]),
            reward_sum=float(row.get("reward_sum", 0.0)),
        )

    def to_checkpoint(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config.model_dump(),
            "d": self.d,
            "arms": [self._arm_to_dict(s) for s in self.arms.values()],
            "archived": [
                self._arm_to_dict(s) for states in self.archived.values() for s in states
            ],
            "t": self.t,
            "rng_state": json.dumps(self.rng.bit_generator.state),
        }

    @classmethod
    def from_checkpoint(cls, data: dict) -> "BanditPolicy":
        config = PolicyConfig(**data["config"])
        arms = data["arms"]
        d = int(data["d"])
        policy = cls(config, [a["id"] for a in arms], d)
        policy.arms = {}
        for row in arms:
            policy.arms[row["id"]] = policy._arm_from_dict(row)
        for row in data.get("archived", []):
            policy.archived.setdefault(row["id"], []).append(policy._arm_from_dict(row))
        indices = [s.index for s in policy.arms.values()]
        indices += [s.index for states in policy.archived.values() for s in states]
        policy._next_index = max(indices, default=-1) + 1
        policy.t = int(data["t"])
        policy.rng.bit_generator.state = json.loads(data["rng_state"])
        return policy

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_checkpoint(), f)
        logger.info(f"Policy checkpoint saved to {path} (t={self.t}, {len(self.arms)} arms)")

    @classmethod
    def load(cls, path) -> "BanditPolicy":
        with open(path) as f:
            return cls.from_checkpoint(json.load(f))


def init_policy(config, arms: Sequence[str], d: int) -> BanditPolicy:
    """Build a policy from a PolicyConfig or a plain dict of its fields."""
    if not isinstance(config, PolicyConfig):
        try:
            config = PolicyConfig(**dict(config))
        except ValidationError as e:
            raise InvalidInputError(f"invalid policy config: {e}") from e
    if not list(arms):
        raise InvalidInputError("policy needs at least one arm")
    return BanditPolicy(config, arms, d)


def select_linucb(policy: BanditPolicy, x, feasible) -> Selection:
    return policy.select_linucb(x, feasible)


def select_eps_greedy(policy: BanditPolicy, x, feasible) -> Selection:
    return policy.select_eps_greedy(x, feasible)


def select_thompson(policy: BanditPolicy, x, feasible) -> Selection:
    return policy.select_thompson(x, feasible)


def update(policy: BanditPolicy, arm_id: str, x, r: float) -> BanditPolicy:
    policy.update(arm_id, x, r)
    return policy


def add_arm(policy: BanditPolicy, arm_id: str) -> BanditPolicy:
    policy.add_arm(arm_id)
    return policy


def remove_arm(policy: BanditPolicy, arm_id: str) -> BanditPolicy:
    policy.remove_arm(arm_id)
    return policy
