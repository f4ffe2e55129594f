#!/usr/bin/env python3
"""
Router Service
Deferred-feedback routing: route() picks a model and parks the decision,
feedback() turns the measured outcome into a reward and updates the policy
exactly once. Pool churn and all policy updates go through one lock.
"""

import json
import logging
import math
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from backend.decision_log import DecisionLog, restore_session
from ml_engine.bandits import BanditPolicy, PolicyConfig, init_policy
from ml_engine.complexity import ComplexityBinner
from ml_engine.context_generator import BLOCKS, ContextPipeline, ContextResult, FeatureConfig
from ml_engine.embeddings import HashingEmbeddingProvider, PrecomputedEmbeddingProvider
from ml_engine.errors import (
    InvalidInputError,
    NoFeasibleArmError,
    NotReadyError,
    ProviderError,
    RouterError,
    StageError,
)
from ml_engine.experiments import trained_classifier
from ml_engine.model_pool import FeasibilityQuery, ModelEntry, ModelPool, PoolEvent
from ml_engine.query_stream import TASK_LABELS
from ml_engine.reward import (
    DecisionRecord,
    Observation,
    RewardParams,
    normalize_accuracy,
    normalize_energy,
    reward,
)
from ml_engine.semantic_clustering import ClusterModel
from ml_engine.task_classifier import TaskClassifier

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "config.json"
EMBED_STAGES = ("embed_instruction", "embed_full")


# ------------------------------------------------------------------- errors


class ServiceError(Exception):
    status_code = 500


class BadRequestError(ServiceError):
    status_code = 400


class NotFoundError(ServiceError):
    status_code = 404


class ConflictError(ServiceError):
    status_code = 409


class UnavailableError(ServiceError):
    status_code = 503


# ------------------------------------------------------------------- config


class FeatureSettings(BaseModel):
    task_labels: List[str] = Field(default_factory=lambda: list(TASK_LABELS))
    n_clusters: int = Field(3, ge=1)
    n_bins: int = Field(3, ge=1)
    d_emb: int = Field(64, ge=1)
    max_tokens: int = Field(256, ge=1)
    blocks: List[str] = Field(default_factory=lambda: list(BLOCKS))
    classifier_path: Optional[str] = None
    embedding_file: Optional[str] = None
    seed: int = 0


class RouterConfig(BaseModel):
    lam: float = Field(0.4, ge=0, le=1)
    l_max_default_ms: Optional[float] = Field(None, gt=0)
    overhead_ms: float = Field(0.0, ge=0)
    moving_average_window: int = Field(50, ge=1)
    selection_window: int = Field(25, ge=1)
    pending_ttl_s: float = Field(3600.0, gt=0)
    pool_path: Optional[str] = None
    features: FeatureSettings = Field(default_factory=FeatureSettings)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    accuracy_bounds: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    e_max_wh: Optional[float] = Field(None, gt=0)
    decision_log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = Field(100, ge=1)

    @classmethod
    def load(cls, path=None) -> "RouterConfig":
        path = Path(path or os.environ.get("ECOROUTE_CONFIG") or DEFAULT_CONFIG_PATH)
        with open(path) as f:
            return cls(**json.load(f))


def _resolve(path: Optional[str]) -> Optional[Path]:
    if not path:
        return None
    p = Path(path)
    return p if p.is_absolute() else REPO_ROOT / p


def clusters_sidecar(checkpoint: Path) -> Path:
    """Cluster centroids are checkpointed next to the policy file."""
    return checkpoint.with_name(checkpoint.stem + ".clusters.json")


def build_service_pipeline(settings: FeatureSettings) -> ContextPipeline:
    if settings.embedding_file:
        provider = PrecomputedEmbeddingProvider(_resolve(settings.embedding_file))
    else:
        provider = HashingEmbeddingProvider(settings.d_emb, settings.max_tokens)
    if settings.classifier_path:
        classifier = TaskClassifier.load(_resolve(settings.classifier_path))
    else:
        classifier = trained_classifier(
            tuple(settings.task_labels), provider.d_emb, settings.seed
        )
    return ContextPipeline(
        provider,
        classifier,
        ClusterModel(settings.n_clusters, provider.d_emb),
        ComplexityBinner(settings.n_bins),
        FeatureConfig(tuple(settings.blocks)),
    )


# ----------------------------------------------------------------- service


@dataclass
class PendingDecision:
    request_id: str
    arm_id: str
    x: np.ndarray
    lam: float
    context: ContextResult
    feasible: List[str]
    exploration: bool
    created_at: float


@dataclass
class RouteDecision:
    request_id: str
    model_id: str
    context: Dict
    scores: Dict[str, float]
    feasible: List[str]
    exploration: bool
    decision_latency_ms: float


@dataclass
class StageTimer:
    totals: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def add(self, stage: str, ms: float):
        self.totals[stage] = self.totals.get(stage, 0.0) + ms
        self.counts[stage] = self.counts.get(stage, 0) + 1

    def means(self) -> Dict[str, float]:
        return {s: self.totals[s] / self.counts[s] for s in self.totals}


class RouterService:
    """
    Many route/feedback callers may run concurrently. Context generation runs
    outside the service lock; selection, policy updates, churn and log writes
    run inside it, so updates are applied in finalization order.
    """

    def __init__(
        self,
        config: Optional[RouterConfig] = None,
        pool: Optional[ModelPool] = None,
        pipeline: Optional[ContextPipeline] = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config or RouterConfig()
        self.pool = pool or ModelPool.load(_resolve(self.config.pool_path))
        self.pipeline = pipeline or build_service_pipeline(self.config.features)
        self.clock = clock
        self.e_max = self.config.e_max_wh or self.pool.max_query_energy()
        if not self.pool.active_ids():
            raise NotReadyError("pool has no active models")

        self._lock = threading.RLock()
        self._pending: Dict[str, PendingDecision] = {}
        self._reserved: set = set()
        self._finalized: set = set()
        self._expired: set = set()
        self._recent = deque(maxlen=self.config.selection_window)
        self._timer = StageTimer()
        self._reward_total = 0.0
        self._routed = 0

        log_path = _resolve(self.config.decision_log_path)
        self.log = DecisionLog(log_path) if log_path else None
        self.checkpoint_path = _resolve(self.config.checkpoint_path)
        self._restore_clusters()
        self.policy = self._restore_policy()
        self.pool.subscribe(self._mirror_churn)
        logger.info(
            f"Router ready: {len(self.policy.arm_ids)} arms, d={self.policy.d}, "
            f"policy={self.policy.kind}, lambda={self.config.lam}"
        )

    # -------------------------------------------------------------- restore

    def _restore_policy(self) -> BanditPolicy:
        """
        Resume from the decision log when it holds a session, else from the
        checkpoint, else start fresh. Only a resumed log session continues
        without a new session header.
        """
        d = self.pipeline.d
        if self.log and self.log.has_session():
            session = restore_session(self.log.path)
            if session.policy.d == d:
                self._finalized.update(session.request_ids)
                self._replay_pool(session.pool_events)
                self._sync_arms(session.policy, log_changes=True)
                logger.info(
                    f"✅ Resumed session from {self.log.path}: "
                    f"{session.decisions} decisions, {len(self._finalized)} finalized ids"
                )
                return session.policy
            logger.warning(
                f"Logged session has d={session.policy.d}, pipeline has d={d}; starting a new session"
            )

        policy, state = None, None
        if self.checkpoint_path and self.checkpoint_path.exists():
            loaded = BanditPolicy.load(self.checkpoint_path)
            if loaded.d == d:
                policy = loaded
                self._sync_arms(policy, log_changes=False)
                state = policy.to_checkpoint()
                logger.info(
                    f"✅ Resumed policy from {self.checkpoint_path} "
                    f"({policy.total_pulls()} pulls)"
                )
            else:
                logger.warning(f"Checkpoint has d={loaded.d}, pipeline has d={d}; ignoring it")
        if policy is None:
            policy = init_policy(self.config.policy, self.pool.active_ids(), d)
        if self.log:
            self.log.log_session(
                policy.arm_ids, policy.d, policy.config.model_dump(), self.config.lam, state=state
            )
        return policy

    def _replay_pool(self, events: List[Dict]):
        for ev in events:
            model_id = ev["model_id"]
            active = model_id in self.pool and self.pool.get(model_id).active
            if ev["op"] == "add" and not active and ev.get("entry"):
                self.pool.add_model(ModelEntry.from_dict(ev["entry"]))
            elif ev["op"] == "deactivate" and active:
                self.pool.deactivate_model(model_id)

    def _sync_arms(self, policy: BanditPolicy, log_changes: bool):
        """Align the policy's arms with the pool's active models."""
        active = self.pool.active_ids()
        for arm_id in policy.arm_ids:
            if arm_id not in active:
                policy.remove_arm(arm_id)
                if log_changes and self.log:
                    self.log.log_pool("deactivate", arm_id)
        for arm_id in active:
            if arm_id not in policy.arms:
                policy.add_arm(arm_id)
                if log_changes and self.log:
                    self.log.log_pool("add", arm_id, self.pool.get(arm_id).to_dict())

    def _clusters_path(self) -> Optional[Path]:
        return clusters_sidecar(self.checkpoint_path) if self.checkpoint_path else None

    def _restore_clusters(self):
        path = self._clusters_path()
        if path is None or not path.exists():
            return
        with open(path) as f:
            data = json.load(f)
        current = self.pipeline.clusters
        if int(data.get("k", -1)) != current.k or int(data.get("d_emb", -1)) != current.d_emb:
            logger.warning(f"Cluster file {path} does not match the pipeline; keeping fresh clusters")
            return
        self.pipeline.clusters = ClusterModel.from_dict(data)
        restored = self.pipeline.clusters
        logger.info(f"Restored {restored.size} cluster centroids from {path}")

    # ------------------------------------------------------------ internals

    def _mirror_churn(self, event: PoolEvent):
        if event.kind == "add":
            self.policy.add_arm(event.model_id)
        else:
            self.policy.remove_arm(event.model_id)

    def _known(self, request_id: str) -> bool:
        return (
            request_id in self._pending
            or request_id in self._reserved
            or request_id in self._finalized
            or request_id in self._expired
        )

    def expire_pending(self, now: Optional[float] = None) -> List[str]:
        """Drop decisions older than the TTL without updating the policy."""
        now = self.clock() if now is None else now
        with self._lock:
            stale = [
                rid for rid, p in self._pending.items()
                if now - p.created_at > self.config.pending_ttl_s
            ]
            for rid in stale:
                del self._pending[rid]
                self._expired.add(rid)
        for rid in stale:
            logger.info(f"Pending decision {rid} expired without feedback")
        return stale

    # ---------------------------------------------------------------- route

    def route(
        self,
        request_id: str,
        text: str,
        l_max_ms: Optional[float] = None,
        lambda_override: Optional[float] = None,
    ) -> RouteDecision:
        start = time.perf_counter()
        if not request_id:
            raise BadRequestError("request_id is empty")
        if text is None or not text.strip():
            raise BadRequestError("text is empty")
        if lambda_override is not None and not 0.0 <= lambda_override <= 1.0:
            raise BadRequestError(f"lambda_override must be in [0, 1], got {lambda_override}")
        if l_max_ms is not None and not l_max_ms > 0:
            raise BadRequestError("l_max_ms must be positive")

        self.expire_pending()
        with self._lock:
            if self._known(request_id):
                raise ConflictError(f"request '{request_id}' already routed")
            self._reserved.add(request_id)

        try:
            try:
                ctx = self.pipeline.generate_context(text)
            except StageError as e:
                if isinstance(e.error, ProviderError):
                    raise UnavailableError(str(e)) from e
                raise BadRequestError(str(e)) from e

            l_max = l_max_ms or self.config.l_max_default_ms or math.inf
            with self._lock:
                decide_start = time.perf_counter()
                try:
                    feasible = self.pool.feasible_set(
                        FeasibilityQuery(ctx.task, l_max), self.config.overhead_ms
                    )
                    selection = self.policy.select(ctx.vector, feasible)
                except NoFeasibleArmError as e:
                    raise UnavailableError(str(e)) from e
                except InvalidInputError as e:
                    raise BadRequestError(str(e)) from e
                self._timer.add("decision", (time.perf_counter() - decide_start) * 1000)
                for stage, ms in ctx.timings_ms.items():
                    self._timer.add(stage, ms)
                self._pending[request_id] = PendingDecision(
                    request_id=request_id,
                    arm_id=selection.arm_id,
                    x=np.array(ctx.vector.values),
                    lam=self.config.lam if lambda_override is None else lambda_override,
                    context=ctx,
                    feasible=feasible,
                    exploration=selection.exploration,
                    created_at=self.clock(),
                )
                self._recent.append(selection.arm_id)
                self._routed += 1
        finally:
            with self._lock:
                self._reserved.discard(request_id)

        embed_ms = sum(ctx.timings_ms.get(s, 0.0) for s in EMBED_STAGES)
        latency = (time.perf_counter() - start) * 1000 - embed_ms
        return RouteDecision(
            request_id=request_id,
            model_id=selection.arm_id,
            context=ctx.breakdown(),
            scores=selection.scores,
            feasible=feasible,
            exploration=selection.exploration,
            decision_latency_ms=max(0.0, latency),
        )

    # ------------------------------------------------------------- feedback

    def feedback(
        self,
        request_id: str,
        accuracy_raw: float,
        energy_wh: float,
        latency_ms: float,
        metric: Optional[str] = None,
    ) -> Dict:
        for name, value in (("accuracy_raw", accuracy_raw), ("energy_wh", energy_wh),
                            ("latency_ms", latency_ms)):
            if value is None or not math.isfinite(value):
                raise BadRequestError(f"{name} must be a finite number")
        if energy_wh < 0 or latency_ms < 0:
            raise BadRequestError("energy_wh and latency_ms must be nonnegative")

        self.expire_pending()
        with self._lock:
            if request_id in self._finalized:
                raise ConflictError(f"feedback for '{request_id}' already received")
            if request_id in self._expired:
                raise NotFoundError(f"request '{request_id}' expired")
            pending = self._pending.get(request_id)
            if pending is None:
                raise NotFoundError(f"unknown request '{request_id}'")

            task = pending.context.task
            bounds = self.config.accuracy_bounds.get(task, (0.0, 1.0))
            try:
                obs = Observation(
                    accuracy_raw=accuracy_raw,
                    accuracy_norm=normalize_accuracy(accuracy_raw, bounds),
                    energy_wh=energy_wh,
                    energy_norm=normalize_energy(energy_wh, self.e_max),
                    latency_ms=latency_ms,
                )
                params = RewardParams(pending.lam)
            except InvalidInputError as e:
                raise BadRequestError(str(e)) from e
            r = reward(params, obs)
            self.policy.update(pending.arm_id, pending.x, r, allow_archived=True)

            del self._pending[request_id]
            self._finalized.add(request_id)
            self._reward_total += r
            step = len(self._finalized)
            record = DecisionRecord(
                step=step,
                query_id=request_id,
                arm_id=pending.arm_id,
                context=pending.x.tolist(),
                task=task,
                cluster=pending.context.cluster,
                complexity_bin=pending.context.complexity_bin,
                accuracy_norm=obs.accuracy_norm,
                energy_wh=energy_wh,
                energy_norm=obs.energy_norm,
                latency_ms=latency_ms,
                reward=r,
                lam=pending.lam,
                exploration=pending.exploration,
                feasible=pending.feasible,
            )
            if self.log:
                self.log.log_decision(request_id, record)
            if self.checkpoint_path and step % self.config.checkpoint_every == 0:
                self.checkpoint()

        return {
            "request_id": request_id,
            "model_id": pending.arm_id,
            "reward": r,
            "metric": metric,
            "status": "finalized",
        }

    # ---------------------------------------------------------------- churn

    def pool_churn(self, op: str, payload) -> Dict:
        with self._lock:
            try:
                if op == "add":
                    if not isinstance(payload, dict):
                        raise InvalidInputError("add expects a model entry object")
                    entry = ModelEntry.from_dict(payload)
                    self.pool.add_model(entry)
                    if self.log:
                        self.log.log_pool("add", entry.id, entry.to_dict())
                    model_id = entry.id
                elif op == "deactivate":
                    model_id = payload if isinstance(payload, str) else None
                    if not model_id:
                        raise InvalidInputError("deactivate expects a model id")
                    if model_id not in self.pool:
                        raise NotFoundError(f"unknown model '{model_id}'")
                    self.pool.deactivate_model(model_id)
                    if self.log:
                        self.log.log_pool("deactivate", model_id)
                else:
                    raise InvalidInputError(f"unknown pool operation '{op}'")
            except RouterError as e:
                raise BadRequestError(str(e)) from e
            active = self.pool.active_ids()
        return {"op": op, "model_id": model_id, "active_models": active}

    # ---------------------------------------------------------------- stats

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def stats(self) -> Dict:
        with self._lock:
            arms = {}
            for arm_id, s in self.policy.arms.items():
                arms[arm_id] = {
                    "pulls": s.pulls,
                    "mean_reward": s.mean_reward,
                    "theta_norm": float(np.linalg.norm(s.theta)),
                }
            archived_pulls = {
                arm_id: sum(s.pulls for s in states)
                for arm_id, states in self.policy.archived.items()
            }
            recent = list(self._recent)
            frequencies = {a: recent.count(a) / len(recent) for a in dict.fromkeys(recent)}
            return {
                "policy": self.policy.kind,
                "lam": self.config.lam,
                "arms": arms,
                "archived_pulls": archived_pulls,
                "total_pulls": self.policy.total_pulls(include_archived=True),
                "routed": self._routed,
                "finalized": len(self._finalized),
                "pending": len(self._pending),
                "expired": len(self._expired),
                "realized_reward_total": self._reward_total,
                "selection_frequencies": frequencies,
                "stage_overhead_ms": self._timer.means(),
                "active_models": self.pool.active_ids(),
            }

    # ------------------------------------------------------------ checkpoint

    def checkpoint(self, path=None) -> Path:
        path = Path(path) if path else self.checkpoint_path
        if path is None:
            raise InvalidInputError("no checkpoint path configured")
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.policy.save(path)
            with open(clusters_sidecar(path), "w") as f:
                json.dump(self.pipeline.clusters.to_dict(), f)
        return path
