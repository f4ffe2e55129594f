#!/usr/bin/env python3
"""
Unit tests for the model pool.
Tests profiles, latency feasibility, fallback and churn.
"""

import math
import os
import sys

import pytest
from pydantic import ValidationError

# Add paths
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ml_engine.errors import InvalidInputError, NoFeasibleArmError
from ml_engine.model_pool import (
    FeasibilityQuery,
    ModelEntry,
    ModelPool,
    default_pool,
    estimate_latency,
)

TASKS = {"question_answering": 16, "math_reasoning": 256}


def entry(model_id, tokens_per_sec=50.0, params_b=1.0, **overrides):
    data = dict(
        id=model_id,
        family="test",
        params_b=params_b,
        tokens_per_sec=tokens_per_sec,
        max_new_tokens=dict(TASKS),
        energy_per_token_wh=1e-4,
        energy_base_wh=1e-3,
    )
    data.update(overrides)
    return ModelEntry.from_dict(data)


class TestDefaultPool:
    """Tests for the shipped 16-model pool"""

    @pytest.fixture
    def pool(self):
        return default_pool()

    def test_loads_sixteen_active_models(self, pool):
        """Test all sixteen models load active with five task budgets"""
        assert len(pool) == 16
        assert len(set(pool.active_ids())) == 16
        assert "gemma-3-27b" in pool
        assert set(pool.tasks()) == {
            "question_answering",
            "situation_completion",
            "commonsense_reasoning",
            "math_reasoning",
            "summarization",
        }

    def test_max_query_energy(self, pool):
        """Test the normalizing energy is yi-34b on math"""
        yi = pool.get("yi-34b")
        assert pool.max_query_energy() == pytest.approx(yi.query_energy_wh("math_reasoning"))
        assert pool.max_query_energy() == pytest.approx(0.068 + 0.00068 * 256)

    def test_unbounded_budget_keeps_everything_in_order(self, pool):
        """Test an unbounded budget keeps every active model in pool order"""
        feasible = pool.feasible_set(FeasibilityQuery("math_reasoning"))
        assert feasible == pool.active_ids()

    def test_budget_filters_slow_models(self, pool):
        """Test a finite budget keeps exactly the models that fit"""
        fq = FeasibilityQuery("summarization", l_max_ms=3000)
        feasible = pool.feasible_set(fq)
        assert feasible
        for model_id in pool.active_ids():
            fits = estimate_latency(pool.get(model_id), "summarization") <= 3000
            assert (model_id in feasible) == fits
        assert "yi-34b" not in feasible

    def test_overhead_counts_against_budget(self, pool):
        """Test pipeline overhead shrinks the feasible set"""
        fq = FeasibilityQuery("summarization", l_max_ms=3000)
        assert len(pool.feasible_set(fq, overhead_ms=1000)) < len(pool.feasible_set(fq))

    def test_fallback_to_fastest_model(self, pool):
        """Test an impossible budget falls back to the fastest model"""
        assert pool.feasible_set(FeasibilityQuery("question_answering", 1.0)) == ["qwen2.5-0.5b"]

    def test_larger_budget_never_shrinks_feasible_set(self, pool):
        """Test feasibility is monotone in the latency budget"""
        budgets = [1.0, 100.0, 500.0, 1000.0, 2000.0, 3000.0, 5000.0, 10_000.0, math.inf]
        for task in pool.tasks():
            previous = set()
            for l_max in budgets:
                current = set(pool.feasible_set(FeasibilityQuery(task, l_max)))
                assert previous <= current
                previous = current

    def test_save_and_load(self, pool, tmp_path):
        """Test the pool file round-trips"""
        pool.save(tmp_path / "pool.json")
        loaded = ModelPool.load(tmp_path / "pool.json")
        assert loaded.to_list() == pool.to_list()


class TestFeasibility:
    """Tests for latency estimation edge cases"""

    def test_latency_estimate(self):
        """Test latency is the task budget over throughput"""
        m = entry("a", tokens_per_sec=32.0)
        assert estimate_latency(m, "math_reasoning") == pytest.approx(8000.0)

    def test_unknown_task_rejected(self):
        """Test latency of an unbudgeted task is rejected"""
        with pytest.raises(InvalidInputError):
            estimate_latency(entry("a"), "translation")

    def test_nonpositive_budget_rejected(self):
        """Test a zero latency budget is rejected"""
        with pytest.raises(InvalidInputError):
            FeasibilityQuery("question_answering", 0.0)

    def test_empty_pool(self):
        """Test a pool without active models has no feasible arm"""
        pool = ModelPool([entry("a")])
        pool.deactivate_model("a")
        with pytest.raises(NoFeasibleArmError):
            pool.feasible_set(FeasibilityQuery("question_answering"))

    def test_models_without_task_budget_are_skipped(self):
        """Test a model missing a task budget only serves its own tasks"""
        pool = ModelPool([entry("a")])
        pool.add_model(entry("sum-only", tokens_per_sec=500.0, max_new_tokens={"summarization": 64}))
        assert pool.feasible_set(FeasibilityQuery("question_answering")) == ["a"]
        assert pool.feasible_set(FeasibilityQuery("question_answering", 1.0)) == ["a"]
        assert pool.feasible_set(FeasibilityQuery("summarization")) == ["sum-only"]

    def test_no_model_serves_task(self):
        """Test a task nobody has a budget for has no feasible arm"""
        with pytest.raises(NoFeasibleArmError):
            ModelPool([entry("a")]).feasible_set(FeasibilityQuery("summarization"))


class TestChurn:
    """Tests for adding and deactivating models"""

    @pytest.fixture
    def pool(self):
        return ModelPool([entry("a"), entry("b", tokens_per_sec=100.0)])

    def test_add_and_deactivate(self, pool):
        """Test churn changes the active set and the fallback"""
        pool.add_model(entry("c", tokens_per_sec=200.0))
        assert pool.active_ids() == ["a", "b", "c"]
        pool.deactivate_model("b")
        assert pool.active_ids() == ["a", "c"]
        assert "b" in pool
        assert pool.feasible_set(FeasibilityQuery("question_answering", 1.0)) == ["c"]

    def test_duplicate_active_id_rejected(self, pool):
        """Test an active id cannot be added twice"""
        with pytest.raises(InvalidInputError):
            pool.add_model(entry("a"))

    def test_readd_after_deactivation(self, pool):
        """Test a deactivated id can come back with a new profile"""
        pool.deactivate_model("a")
        pool.add_model(entry("a", tokens_per_sec=10.0))
        assert pool.get("a").active
        assert pool.get("a").tokens_per_sec == 10.0

    def test_deactivate_unknown_or_inactive(self, pool):
        """Test deactivating unknown or inactive models is rejected"""
        with pytest.raises(InvalidInputError):
            pool.deactivate_model("zzz")
        pool.deactivate_model("a")
        with pytest.raises(InvalidInputError):
            pool.deactivate_model("a")

    def test_listeners_see_events_before_pool_changes(self, pool):
        """Test listeners run before the pool is mutated"""
        seen = []
        pool.subscribe(lambda ev: seen.append((ev.kind, ev.model_id, ev.model_id in pool)))
        pool.add_model(entry("c"))
        pool.deactivate_model("a")
        assert seen == [("add", "c", False), ("deactivate", "a", True)]

    def test_failing_listener_leaves_pool_unchanged(self, pool):
        """Test a refusing listener aborts the addition"""

        def reject(event):
            raise InvalidInputError("arm registry refused")

        pool.subscribe(reject)
        with pytest.raises(InvalidInputError):
            pool.add_model(entry("c"))
        assert "c" not in pool

    def test_malformed_entries(self):
        """Test invalid profiles are rejected as invalid input"""
        with pytest.raises(InvalidInputError):
            entry("a", params_b=0.0)
        with pytest.raises(InvalidInputError):
            entry("a", max_new_tokens={"question_answering": 0})
        with pytest.raises(InvalidInputError):
            entry("a", max_new_tokens={})
        with pytest.raises(InvalidInputError):
            ModelEntry.from_dict({"id": "x", "family": "y"})

    def test_field_level_errors(self):
        """Test validation errors name the offending fields"""
        with pytest.raises(ValidationError) as info:
            ModelEntry(
                id="a",
                family="test",
                params_b=-1.0,
                tokens_per_sec=50.0,
                max_new_tokens={"question_answering": 16},
                energy_per_token_wh=-1e-4,
            )
        locations = {error["loc"][0] for error in info.value.errors()}
        assert locations == {"params_b", "energy_per_token_wh"}
