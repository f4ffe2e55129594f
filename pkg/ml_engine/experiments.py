#!/usr/bin/env python3
"""
Routing Experiments
Runs routing policies and static baselines over a synthetic query stream
against an oracle, and packages the protocols used to evaluate them:
baseline comparison, lambda sweep, feature ablation, model addition and
overhead measurement.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from ml_engine.bandits import PolicyConfig, init_policy
from ml_engine.complexity import ComplexityBinner
from ml_engine.context_generator import (
    ContextPipeline,
    ContextResult,
    FeatureConfig,
    build_context,
    expand_feature_configs,
)
from ml_engine.embeddings import HashingEmbeddingProvider
from ml_engine.errors import InvalidInputError, RouterError, StageError
from ml_engine.model_pool import FeasibilityQuery, ModelEntry, ModelPool, PoolEvent
from ml_engine.oracle import (
    OracleSpec,
    build_default_oracle,
    context_free_oracle,
    task_separable_oracle,
)
from ml_engine.query_stream import (
    TASK_LABELS,
    Query,
    QueryStream,
    build_training_pairs,
    generate_queries,
)
from ml_engine.reward import (
    DecisionRecord,
    RegretLedger,
    RewardParams,
    reward,
    summarize_runs,
)
from ml_engine.semantic_clustering import ClusterModel
from ml_engine.task_classifier import TaskClassifier, TrainingConfig, train_task_classifier

logger = logging.getLogger(__name__)

BASELINES = ("random", "largest", "smallest", "highest_accuracy")
SWEEP_METRICS = ["mean_accuracy", "total_energy_wh", "cumulative_regret"]
COMPARISON_METRICS = [
    "mean_accuracy", "total_energy_wh", "mean_reward", "cumulative_regret", "realized_regret"
]
POLICY_KINDS = ["linucb", "eps_greedy_contextual", "thompson", "eps_greedy"]


class ExperimentConfig(BaseModel):
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    features: Optional[str] = "full"
    lam: float = Field(0.4, ge=0, le=1)
    horizon: int = Field(2500, ge=1)
    seed: int = 0
    reps: int = Field(50, ge=1)
    n_jobs: int = 1
    pool_path: Optional[str] = None
    oracle_path: Optional[str] = None
    oracle_kind: str = "default"
    l_max_ms: Optional[float] = None
    overhead_ms: float = 0.0
    n_clusters: int = Field(3, ge=1)
    n_bins: int = Field(3, ge=1)
    d_emb: int = Field(64, ge=1)
    window: int = Field(50, ge=1)
    policies: List[str] = Field(default_factory=lambda: list(POLICY_KINDS))
    baselines: List[str] = Field(default_factory=lambda: list(BASELINES))
    lambda_grid: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    sweep_reps: int = Field(20, ge=1)
    sweep_policies: List[str] = Field(default_factory=lambda: list(POLICY_KINDS))
    ablation_configs: List[str] = Field(
        default_factory=lambda: ["none", "task", "cluster", "complexity", "pairs", "full"]
    )
    add_at: int = 1000
    new_model_id: str = "gemma-3-12b"
    addition_lam: float = Field(0.2, ge=0, le=1)
    dominance_margin: Optional[float] = None
    adoption_window: int = Field(25, ge=1)
    overhead_queries: int = 500

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls(**json.load(f))


# --------------------------------------------------------------------- setup


@lru_cache(maxsize=32)
def trained_classifier(task_labels: Tuple[str, ...], d_emb: int, seed: int) -> TaskClassifier:
    """Classifier bootstrapped from generated prompts; cached, used read-only."""
    provider = HashingEmbeddingProvider(d_emb)
    pairs = build_training_pairs(provider, list(task_labels), per_task=40, seed=seed)
    config = TrainingConfig(learning_rate=1.0, iterations=1000, seed=seed)
    clf, _ = train_task_classifier(pairs, config, labels=list(task_labels))
    return clf


def build_pipeline(
    features: Optional[FeatureConfig] = None,
    task_labels: Optional[Sequence[str]] = None,
    n_clusters: int = 3,
    n_bins: int = 3,
    d_emb: int = 64,
    seed: int = 0,
) -> ContextPipeline:
    labels = tuple(task_labels or TASK_LABELS)
    provider = HashingEmbeddingProvider(d_emb)
    return ContextPipeline(
        provider,
        trained_classifier(labels, d_emb, seed),
        ClusterModel(n_clusters, d_emb),
        ComplexityBinner(n_bins),
        features if features is not None else FeatureConfig(),
    )


def build_oracle(config: ExperimentConfig, pool: ModelPool) -> OracleSpec:
    if config.oracle_path:
        return OracleSpec.load(config.oracle_path)
    builders = {
        "default": build_default_oracle,
        "task_separable": task_separable_oracle,
        "context_free": context_free_oracle,
    }
    if config.oracle_kind not in builders:
        raise InvalidInputError(f"unknown oracle kind '{config.oracle_kind}'")
    return builders[config.oracle_kind](pool, n_bins=config.n_bins, seed=config.seed)


def make_stream(config: ExperimentConfig, oracle: OracleSpec, seed: int) -> List[Query]:
    stream = QueryStream(
        horizon=config.horizon,
        task_labels=oracle.task_labels,
        n_topics=oracle.n_topics,
        n_bins=config.n_bins,
        seed=seed,
    )
    return generate_queries(stream)


def precompute_contexts(queries: Sequence[Query], pipeline: ContextPipeline) -> List[ContextResult]:
    """Context generation does not depend on routing, so runs sharing a stream can share this."""
    return [pipeline.generate_context(q.text) for q in queries]


def _project(ctx: ContextResult, pipeline: ContextPipeline) -> np.ndarray:
    return build_context(
        ctx.task_index, ctx.cluster, ctx.complexity_bin, pipeline.dims, pipeline.features
    ).values


# -------------------------------------------------------------------- result


@dataclass
class ExperimentResult:
    name: str
    records: List[DecisionRecord]
    ledger: RegretLedger
    seed: int
    config: dict = field(default_factory=dict)
    arm_order: List[str] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        acc = [r.accuracy_norm for r in self.records]
        return {
            "steps": len(self.records),
            "mean_accuracy": float(np.mean(acc)) if acc else math.nan,
            "total_energy_wh": float(sum(r.energy_wh for r in self.records)),
            "mean_reward": float(np.mean([r.reward for r in self.records])) if acc else math.nan,
            "cumulative_regret": self.ledger.cumulative,
            "realized_regret": float(sum(r.realized_regret for r in self.records)),
        }

    def regret_at(self, step: int) -> float:
        """Cumulative pseudo-regret over the first `step` decisions."""
        total = 0.0
        for delta in self.ledger.regrets[:step]:
            total += delta
        return total

    def choices(self) -> List[str]:
        return [r.arm_id for r in self.records]

    def selection_frequencies(self, window: int = 25) -> pd.DataFrame:
        """Trailing-window selection share per arm; each row sums to 1."""
        onehot = pd.get_dummies(pd.Categorical(self.choices(), categories=self.arm_order))
        return onehot.astype(float).rolling(window, min_periods=1).mean()

    def selection_halves(self) -> pd.DataFrame:
        """Per-arm selection share in the first and second half of the run."""
        choices = pd.Series(pd.Categorical(self.choices(), categories=self.arm_order))
        mid = len(choices) // 2
        rows = []
        for half, part in (("first", choices[:mid]), ("second", choices[mid:])):
            shares = part.value_counts(normalize=True)
            for arm in self.arm_order:
                rows.append({"model": arm, "half": half, "frequency": float(shares.get(arm, 0.0))})
        return pd.DataFrame(rows)

    def modal_arm(self, start: int = 0) -> str:
        return pd.Series(self.choices()[start:]).value_counts().index[0]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records])

    def save(self, out_dir, prefix: Optional[str] = None) -> Dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        prefix = prefix or f"{self.name}_seed{self.seed}"
        paths = {
            "ledger": out / f"{prefix}_ledger.csv",
            "decisions": out / f"{prefix}_decisions.csv",
            "summary": out / f"{prefix}_summary.json",
            "timeline": out / f"{prefix}_timeline.csv",
            "heatmap": out / f"{prefix}_selection_halves.csv",
        }
        self.ledger.export_csv(paths["ledger"])
        decisions = self.to_dataframe().drop(columns=["context"])
        decisions.to_csv(paths["decisions"], index=False)
        pd.DataFrame({"step": range(len(self.records)), "model": self.choices()}).to_csv(
            paths["timeline"], index=False
        )
        self.selection_halves().to_csv(paths["heatmap"], index=False)
        with open(paths["summary"], "w") as f:
            json.dump(
                {"name": self.name, "seed": self.seed, "config": self.config, **self.aggregates},
                f,
                indent=2,
            )
        logger.info(f"Results for {self.name} (seed {self.seed}) written to {out}")
        return {k: str(v) for k, v in paths.items()}


def _feasible(pool: ModelPool, q: Query, l_max: float, overhead_ms: float = 0.0) -> List[str]:
    """Feasibility in the simulator always keys on the query's true task."""
    return pool.feasible_set(FeasibilityQuery(q.task, l_max), overhead_ms)


def _record(
    t: int,
    q: Query,
    arm_id: str,
    x: Sequence[float],
    ctx_task: str,
    ctx_cluster: int,
    ctx_bin: int,
    obs,
    r: float,
    params: RewardParams,
    oracle: OracleSpec,
    feasible: List[str],
    ledger: RegretLedger,
    exploration: bool = False,
) -> DecisionRecord:
    opt_arm, opt_reward = oracle.optimal_arm(q.cell, feasible, params)
    chosen_expected = oracle.expected_reward(arm_id, q.cell, params)
    delta = ledger.append(t, arm_id, chosen_expected, opt_reward)
    return DecisionRecord(
        step=t,
        query_id=q.query_id,
        arm_id=arm_id,
        context=[float(v) for v in x],
        task=ctx_task,
        cluster=ctx_cluster,
        complexity_bin=ctx_bin,
        accuracy_norm=obs.accuracy_norm,
        energy_wh=obs.energy_wh,
        energy_norm=obs.energy_norm,
        latency_ms=obs.latency_ms,
        reward=r,
        lam=params.lam,
        optimal_arm=opt_arm,
        optimal_reward=opt_reward,
        chosen_expected_reward=chosen_expected,
        regret=delta,
        realized_regret=opt_reward - r,
        exploration=exploration,
        feasible=list(feasible),
        cell=list(q.cell),
    )


# ----------------------------------------------------------------- baselines


def run_baseline(
    kind: str,
    queries: Sequence[Query],
    oracle: OracleSpec,
    pool: ModelPool,
    params: RewardParams,
    seed: int = 0,
    l_max_ms: Optional[float] = None,
    designated: Optional[str] = None,
    window: int = 50,
    overhead_ms: float = 0.0,
) -> ExperimentResult:
    """Random or fixed-model routing over the stream."""
    if kind not in BASELINES:
        raise InvalidInputError(f"unknown baseline '{kind}'")
    active = pool.active_entries()
    if not active:
        raise InvalidInputError("pool has no active models")
    if designated is not None:
        if designated not in pool.active_ids():
            raise InvalidInputError(f"designated model '{designated}' is not in the pool")
        fixed = designated
    elif kind == "largest":
        fixed = max(active, key=lambda m: m.params_b).id
    elif kind == "smallest":
        fixed = min(active, key=lambda m: m.params_b).id
    elif kind == "highest_accuracy":
        fixed = oracle.highest_accuracy_model([m.id for m in active])
    else:
        fixed = None

    rng = np.random.default_rng([seed, 2])
    outcome_rng = np.random.default_rng([seed, 1])
    ledger = RegretLedger(window)
    records = []
    l_max = math.inf if l_max_ms is None else l_max_ms
    for t, q in enumerate(queries):
        feasible = _feasible(pool, q, l_max, overhead_ms)
        if fixed is None:
            arm = feasible[int(rng.integers(len(feasible)))]
        else:
            arm = fixed if fixed in feasible else feasible[0]
        obs = oracle.sample_outcome(arm, q.cell, outcome_rng)
        r = reward(params, obs)
        records.append(
            _record(t, q, arm, [], q.task, q.topic, q.complexity_bin, obs, r, params, oracle,
                    feasible, ledger)
        )
    return ExperimentResult(
        name=kind,
        records=records,
        ledger=ledger,
        seed=seed,
        config={"baseline": kind, "lam": params.lam, "designated": fixed},
        arm_order=pool.active_ids(),
    )


# -------------------------------------------------------------------- policy


def run_policy(
    policy_config: PolicyConfig,
    features: Optional[FeatureConfig],
    queries: Sequence[Query],
    oracle: OracleSpec,
    pool: ModelPool,
    params: RewardParams,
    seed: int = 0,
    l_max_ms: Optional[float] = None,
    overhead_ms: float = 0.0,
    n_clusters: int = 3,
    d_emb: int = 64,
    window: int = 50,
    contexts: Optional[Sequence[ContextResult]] = None,
    additions: Optional[Dict[int, ModelEntry]] = None,
    name: Optional[str] = None,
) -> ExperimentResult:
    """
    The online routing loop: context, feasibility filter, select, observe,
    reward, update, and regret against the oracle's optimum.
    features=None routes on the bias term only.
    """
    pool = pool.copy()
    features = features if features is not None else FeatureConfig(())
    pipeline = build_pipeline(
        features, oracle.task_labels, n_clusters, oracle.n_bins, d_emb, seed=seed
    )
    policy = init_policy(policy_config, pool.active_ids(), pipeline.d)

    def mirror(event: PoolEvent):
        if event.kind == "add":
            policy.add_arm(event.model_id)
        else:
            policy.remove_arm(event.model_id)

    pool.subscribe(mirror)
    additions = dict(additions or {})
    arm_order = pool.active_ids() + [e.id for e in additions.values()]

    outcome_rng = np.random.default_rng([seed, 1])
    ledger = RegretLedger(window)
    records = []
    l_max = math.inf if l_max_ms is None else l_max_ms
    for t, q in enumerate(queries):
        try:
            if t in additions:
                pool.add_model(ModelEntry.from_dict(additions[t].to_dict()))
            ctx = contexts[t] if contexts is not None else pipeline.generate_context(q.text)
            x = _project(ctx, pipeline)
            feasible = _feasible(pool, q, l_max, overhead_ms)
            selection = policy.select(x, feasible)
            obs = oracle.sample_outcome(selection.arm_id, q.cell, outcome_rng)
            r = reward(params, obs)
            policy.update(selection.arm_id, x, r)
            records.append(
                _record(t, q, selection.arm_id, x, ctx.task, ctx.cluster, ctx.complexity_bin,
                        obs, r, params, oracle, feasible, ledger, selection.exploration)
            )
        except StageError as e:
            raise StageError(e.stage, e.error, step=t) from e
        except RouterError as e:
            raise StageError("routing", e, step=t) from e

    return ExperimentResult(
        name=name or policy_config.kind,
        records=records,
        ledger=ledger,
        seed=seed,
        config={
            "policy": policy_config.model_dump(),
            "features": features.name,
            "lam": params.lam,
            "l_max_ms": l_max_ms,
        },
        arm_order=arm_order,
    )


def load_environment(config: ExperimentConfig) -> Tuple[ModelPool, OracleSpec]:
    pool = ModelPool.load(config.pool_path)
    return pool, build_oracle(config, pool)


def run_comparison(config: ExperimentConfig, seed: Optional[int] = None) -> List[ExperimentResult]:
    """Every configured policy and baseline on one stream."""
    unknown = [k for k in config.policies if k not in POLICY_KINDS]
    if unknown:
        raise InvalidInputError(f"unknown policy kinds: {unknown}")
    names = list(config.policies) + list(config.baselines)
    if not names or len(set(names)) != len(names):
        raise InvalidInputError(f"policies and baselines must be non-empty and distinct: {names}")
    seed = config.seed if seed is None else seed
    pool, oracle = load_environment(config)
    queries = make_stream(config, oracle, seed)
    params = RewardParams(config.lam)
    features = FeatureConfig.named(config.features)
    pipeline = build_pipeline(features, oracle.task_labels, config.n_clusters, oracle.n_bins,
                              config.d_emb, seed=seed)
    contexts = precompute_contexts(queries, pipeline)
    results = []
    for kind in config.policies:
        results.append(
            run_policy(
                config.policy.model_copy(update={"kind": kind, "seed": seed}),
                features,
                queries,
                oracle,
                pool,
                params,
                seed=seed,
                l_max_ms=config.l_max_ms,
                overhead_ms=config.overhead_ms,
                n_clusters=config.n_clusters,
                d_emb=config.d_emb,
                window=config.window,
                contexts=contexts,
            )
        )
    for kind in config.baselines:
        results.append(
            run_baseline(kind, queries, oracle, pool, params, seed=seed,
                         l_max_ms=config.l_max_ms, window=config.window,
                         overhead_ms=config.overhead_ms)
        )
    return results


def _comparison_rep(config: ExperimentConfig, rep: int) -> List[dict]:
    results = run_comparison(config, seed=config.seed + rep)
    return [{"name": r.name, "rep": rep, **r.aggregates} for r in results]


def run_comparison_reps(
    config: ExperimentConfig, reps: Optional[int] = None
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Returns (per-rep table, per policy/baseline summary with 95% CIs)."""
    reps = config.reps if reps is None else reps
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    rows = Parallel(n_jobs=config.n_jobs)(
        delayed(_comparison_rep)(config, rep) for rep in range(reps)
    )
    table = pd.DataFrame([row for chunk in rows for row in chunk])
    order = list(config.policies) + list(config.baselines)
    summary = summarize_runs(table, ["name"], COMPARISON_METRICS)
    summary = summary.set_index("name").reindex(order).reset_index()
    logger.info(f"Comparison finished: {len(order)} routers x {reps} reps")
    return table, summary


# --------------------------------------------------------------- lambda sweep


def pareto_mask(accuracy: Sequence[float], energy: Sequence[float]) -> np.ndarray:
    """True where no other point has accuracy >= and energy <= with one strict."""
    acc = np.asarray(accuracy, dtype=float)
    en = np.asarray(energy, dtype=float)
    mask = np.ones(len(acc), dtype=bool)
    for i in range(len(acc)):
        dominated = (acc >= acc[i]) & (en <= en[i]) & ((acc > acc[i]) | (en < en[i]))
        mask[i] = not dominated.any()
    return mask


def static_pareto_front(
    oracle: OracleSpec, queries: Sequence[Query], model_ids: Optional[Sequence[str]] = None
) -> pd.DataFrame:
    """Expected (accuracy, energy) of always routing to one model, with front membership."""
    model_ids = list(model_ids or oracle.model_ids)
    rows = []
    for m in model_ids:
        acc = np.mean([oracle.expected_accuracy(m, q.cell) for q in queries])
        energy = sum(oracle.expected_energy_wh(m, q.task_index) for q in queries)
        rows.append({"model": m, "mean_accuracy": float(acc), "total_energy_wh": float(energy)})
    df = pd.DataFrame(rows)
    df["on_front"] = pareto_mask(df["mean_accuracy"], df["total_energy_wh"])
    return df


def _sweep_rep(config: ExperimentConfig, rep: int) -> List[dict]:
    seed = config.seed + rep
    pool, oracle = load_environment(config)
    queries = make_stream(config, oracle, seed)
    features = FeatureConfig.named(config.features)
    pipeline = build_pipeline(features, oracle.task_labels, config.n_clusters, oracle.n_bins,
                              config.d_emb, seed=seed)
    contexts = precompute_contexts(queries, pipeline)
    rows = []
    for lam in config.lambda_grid:
        for kind in config.sweep_policies:
            result = run_policy(
                config.policy.model_copy(update={"kind": kind, "seed": seed}),
                features,
                queries,
                oracle,
                pool,
                RewardParams(lam),
                seed=seed,
                l_max_ms=config.l_max_ms,
                n_clusters=config.n_clusters,
                d_emb=config.d_emb,
                contexts=contexts,
            )
            agg = result.aggregates
            rows.append({"lambda": lam, "policy": kind, "rep": rep,
                         **{k: agg[k] for k in SWEEP_METRICS}})
    return rows


def run_lambda_sweep(
    config: ExperimentConfig, grid: Optional[Sequence[float]] = None, reps: Optional[int] = None
) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Returns (per-rep table, per lambda/policy summary with 95% CIs, static Pareto front)."""
    grid = list(config.lambda_grid if grid is None else grid)
    reps = config.sweep_reps if reps is None else reps
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    if not grid or any(not 0.0 <= lam <= 1.0 for lam in grid):
        raise InvalidInputError(f"lambda grid must lie in [0, 1]: {grid}")
    config = config.model_copy(update={"lambda_grid": grid})
    rows = Parallel(n_jobs=config.n_jobs)(delayed(_sweep_rep)(config, rep) for rep in range(reps))
    table = pd.DataFrame([row for chunk in rows for row in chunk])
    summary = summarize_runs(table, ["lambda", "policy"], SWEEP_METRICS)

    pool, oracle = load_environment(config)
    front = static_pareto_front(oracle, make_stream(config, oracle, config.seed), pool.active_ids())
    logger.info(f"Lambda sweep finished: {len(grid)} values x {reps} reps")
    return table, summary, front


# ------------------------------------------------------------ feature ablation


def _ablation_rep(config: ExperimentConfig, names: List[str], rep: int) -> List[dict]:
    seed = config.seed + rep
    pool, oracle = load_environment(config)
    queries = make_stream(config, oracle, seed)
    full = build_pipeline(FeatureConfig(), oracle.task_labels, config.n_clusters, oracle.n_bins,
                          config.d_emb, seed=seed)
    contexts = precompute_contexts(queries, full)
    rows = []
    for name in names:
        result = run_policy(
            config.policy.model_copy(update={"seed": seed}),
            FeatureConfig.named(name),
            queries,
            oracle,
            pool,
            RewardParams(config.lam),
            seed=seed,
            l_max_ms=config.l_max_ms,
            n_clusters=config.n_clusters,
            d_emb=config.d_emb,
            contexts=contexts,
            name=name,
        )
        rows.append({"config": name, "rep": rep, "final_regret": result.ledger.cumulative})
    return rows


def run_feature_ablation(
    config: ExperimentConfig,
    configs: Optional[Sequence[str]] = None,
    reps: Optional[int] = None,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Final cumulative regret per feature configuration across repetitions."""
    names = expand_feature_configs(list(configs or config.ablation_configs))
    reps = config.reps if reps is None else reps
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    rows = Parallel(n_jobs=config.n_jobs)(
        delayed(_ablation_rep)(config, names, rep) for rep in range(reps)
    )
    table = pd.DataFrame([row for chunk in rows for row in chunk])
    grouped = table.groupby("config", sort=False)["final_regret"]
    summary = pd.DataFrame(
        {
            "median": grouped.median(),
            "q25": grouped.quantile(0.25),
            "q75": grouped.quantile(0.75),
            "mean": grouped.mean(),
        }
    ).reindex(names)
    summary.index.name = "config"
    return table, summary.reset_index()


# -------------------------------------------------------------- model addition


def run_model_addition(
    config: ExperimentConfig,
    add_at: Optional[int] = None,
    new_model_id: Optional[str] = None,
    seed: Optional[int] = None,
) -> Tuple[ExperimentResult, pd.Series]:
    """
    Starts without new_model_id, registers it at step add_at and tracks its
    windowed selection share.
    """
    add_at = config.add_at if add_at is None else add_at
    new_model_id = new_model_id or config.new_model_id
    seed = config.seed if seed is None else seed
    if not 0 <= add_at < config.horizon:
        raise InvalidInputError(f"add_at={add_at} must lie in [0, {config.horizon})")

    full_pool, oracle = load_environment(config)
    if new_model_id not in full_pool:
        raise InvalidInputError(f"unknown model '{new_model_id}'")
    if config.dominance_margin is not None:
        oracle = oracle.with_dominant_model(new_model_id, config.dominance_margin)
    initial = full_pool.subset([m for m in full_pool.active_ids() if m != new_model_id])
    queries = make_stream(config, oracle, seed)

    result = run_policy(
        config.policy.model_copy(update={"seed": seed}),
        FeatureConfig.named(config.features),
        queries,
        oracle,
        initial,
        RewardParams(config.addition_lam),
        seed=seed,
        l_max_ms=config.l_max_ms,
        n_clusters=config.n_clusters,
        d_emb=config.d_emb,
        additions={add_at: full_pool.get(new_model_id)},
        name="model_addition",
    )
    adoption = result.selection_frequencies(config.adoption_window)[new_model_id]
    adoption.name = new_model_id
    return result, adoption


# ------------------------------------------------------------------ overhead

CONTEXT_STAGES = {
    "task_classification": ("embed_instruction", "task_classification"),
    "semantic_clustering": ("embed_full", "cluster_assignment"),
    "complexity": ("complexity", "complexity_bin"),
    "context_build": ("context_build",),
}
DECISION_POLICIES = ("linucb", "eps_greedy", "eps_greedy_contextual", "thompson")


def measure_overhead(
    n: int = 500, pool: Optional[ModelPool] = None, seed: int = 0
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Mean wall-clock per pre-inference stage and per policy decision over n
    queries, and the overhead relative to each model's estimated latency.
    """
    if n < 100:
        raise InvalidInputError("overhead measurement needs n >= 100")
    pool = pool or ModelPool.load()
    oracle = build_default_oracle(pool, seed=seed)
    queries = generate_queries(QueryStream(horizon=n, seed=seed))
    pipeline = build_pipeline(FeatureConfig(), oracle.task_labels, seed=seed)

    contexts = []
    stage_ms: Dict[str, List[float]] = {stage: [] for stage in CONTEXT_STAGES}
    for q in queries:
        ctx = pipeline.generate_context(q.text)
        contexts.append(ctx)
        for stage, parts in CONTEXT_STAGES.items():
            stage_ms[stage].append(sum(ctx.timings_ms[p] for p in parts))

    outcome_rng = np.random.default_rng([seed, 1])
    params = RewardParams()
    arms = pool.active_ids()
    for kind in DECISION_POLICIES:
        policy = init_policy(PolicyConfig(kind=kind, seed=seed), arms, pipeline.d)
        timings = []
        for q, ctx in zip(queries, contexts):
            start = time.perf_counter()
            selection = policy.select(ctx.vector, arms)
            timings.append((time.perf_counter() - start) * 1000)
            obs = oracle.sample_outcome(selection.arm_id, q.cell, outcome_rng)
            policy.update(selection.arm_id, ctx.vector, reward(params, obs))
        stage_ms[f"decision_{kind}"] = timings

    table = pd.DataFrame(
        [
            {"stage": stage, "mean_ms": float(np.mean(v)), "std_ms": float(np.std(v))}
            for stage, v in stage_ms.items()
        ]
    )
    context_total = float(sum(np.mean(stage_ms[s]) for s in CONTEXT_STAGES))
    for kind in DECISION_POLICIES:
        total = context_total + float(np.mean(stage_ms[f"decision_{kind}"]))
        table.loc[len(table)] = {"stage": f"total_{kind}", "mean_ms": total, "std_ms": math.nan}

    total_linucb = float(table.loc[table["stage"] == "total_linucb", "mean_ms"].iloc[0])
    relative = []
    for m in pool.active_entries():
        latency = float(np.mean([oracle.latency_ms[oracle.model_index(m.id), q.task_index]
                                 for q in queries]))
        relative.append({"model": m.id, "mean_latency_ms": latency,
                         "overhead_pct": 100.0 * total_linucb / latency})
    logger.info(f"Measured overhead over {n} queries: {total_linucb:.3f} ms per query (LinUCB)")
    return table, pd.DataFrame(relative)


def scaled_pool(size: int, base: Optional[ModelPool] = None) -> ModelPool:
    """Pool of `size` models cycling through the base entries with unique ids."""
    base = base or ModelPool.load()
    entries = base.active_entries()
    out = []
    for i in range(size):
        src = entries[i % len(entries)].to_dict()
        src["id"] = f"{src['id']}#{i // len(entries)}" if i >= len(entries) else src["id"]
        out.append(ModelEntry.from_dict(src))
    return ModelPool(out)


def measure_scaling(
    pool_sizes: Sequence[int] = (4, 8, 16, 32), n: int = 200, seed: int = 0
) -> pd.DataFrame:
    """Per-query wall clock (context + LinUCB select + update) at fixed d."""
    queries = generate_queries(QueryStream(horizon=n, seed=seed))
    rows = []
    for size in pool_sizes:
        pool = scaled_pool(size)
        pipeline = build_pipeline(FeatureConfig(), seed=seed)
        policy = init_policy(PolicyConfig(seed=seed), pool.active_ids(), pipeline.d)
        start = time.perf_counter()
        for q in queries:
            ctx = pipeline.generate_context(q.text)
            feasible = pool.feasible_set(FeasibilityQuery(ctx.task))
            selection = policy.select(ctx.vector, feasible)
            policy.update(selection.arm_id, ctx.vector, 0.5)
        rows.append({"pool_size": size, "ms_per_query": (time.perf_counter() - start) * 1000 / n})
    return pd.DataFrame(rows)
