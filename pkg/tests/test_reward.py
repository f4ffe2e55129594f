#!/usr/bin/env python3
"""
Unit tests for reward scalarization and regret bookkeeping.
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

# Add paths
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from ml_engine.errors import InvalidInputError
from ml_engine.reward import (
    LEDGER_COLUMNS,
    DecisionRecord,
    Observation,
    RegretLedger,
    RewardParams,
    instantaneous_regret,
    ledger_metrics,
    normalize_accuracy,
    normalize_energy,
    reward,
    summarize_runs,
)


def observation(acc_norm, energy_norm):
    return Observation(
        accuracy_raw=acc_norm,
        accuracy_norm=acc_norm,
        energy_wh=energy_norm,
        energy_norm=energy_norm,
        latency_ms=10.0,
    )


class TestReward:
    """Tests for the lambda-weighted reward"""

    def test_endpoints(self):
        """Test lambda 0 and 1 reduce to accuracy and negative energy."""
        assert reward(RewardParams(0.0), observation(1.0, 0.7)) == 1.0
        assert reward(RewardParams(1.0), observation(0.9, 1.0)) == -1.0

    def test_weighted_sum(self):
        """Test intermediate lambda mixes accuracy and energy linearly."""
        params = RewardParams(0.4)
        assert params.alpha_weight == pytest.approx(0.6)
        assert reward(params, observation(0.5, 0.25)) == pytest.approx(0.6 * 0.5 - 0.4 * 0.25)

    def test_lambda_out_of_range(self):
        """Test lambda outside [0, 1] is rejected."""
        with pytest.raises(InvalidInputError):
            RewardParams(1.5)
        with pytest.raises(InvalidInputError):
            RewardParams(-0.1)

    def test_normalization(self):
        """Test accuracy and energy normalize into [0, 1]."""
        assert normalize_accuracy(0.3, (0.2, 0.4)) == pytest.approx(0.5)
        assert normalize_accuracy(0.9, (0.2, 0.4)) == 1.0
        assert normalize_accuracy(0.1, (0.2, 0.4)) == 0.0
        assert normalize_energy(0.05, 0.2) == pytest.approx(0.25)
        assert normalize_energy(0.5, 0.2) == 1.0
        with pytest.raises(InvalidInputError):
            normalize_accuracy(0.5, (0.4, 0.4))
        with pytest.raises(InvalidInputError):
            normalize_energy(0.1, 0.0)

    def test_instantaneous_regret(self):
        """Test regret is the gap to the best feasible reward."""
        assert instantaneous_regret(0.3, {"a": 0.3, "b": 0.5}) == pytest.approx(0.2)
        assert instantaneous_regret(0.5, {"a": 0.3, "b": 0.5}) == 0.0
        with pytest.raises(InvalidInputError):
            instantaneous_regret(0.1, {})


class TestRegretLedger:
    """Tests for cumulative and moving-average regret"""

    def test_cumulative_matches_running_sum(self):
        """Test cumulative regret equals the running sum of deltas."""
        rng = np.random.default_rng(0)
        ledger = RegretLedger(window=10)
        expected = 0.0
        for t in range(500):
            opt = float(rng.random())
            chosen = opt - float(rng.random()) * 0.3
            delta = ledger.append(t, "m", chosen, opt)
            assert delta >= 0
            expected += opt - chosen
        assert ledger.cumulative == pytest.approx(expected, abs=1e-9)
        assert len(ledger) == 500

    def test_moving_average_uses_available_prefix(self):
        """Test the moving average averages the prefix before the window fills."""
        cumulative, moving = ledger_metrics([1.0, 2.0, 3.0, 4.0], window=3)
        assert cumulative == [1.0, 3.0, 6.0, 10.0]
        assert moving == pytest.approx([1.0, 1.5, 2.0, 3.0])

    def test_rejects_reward_above_optimum(self):
        """Test a chosen reward above the optimum is rejected."""
        ledger = RegretLedger()
        assert ledger.append(0, "m", 0.5 + 1e-15, 0.5) == 0.0
        with pytest.raises(InvalidInputError):
            ledger.append(1, "m", 0.6, 0.5)

    def test_dataframe_and_csv(self, tmp_path):
        """Test the ledger exports matching frames and CSV."""
        ledger = RegretLedger(window=2)
        for t, (chosen, opt) in enumerate([(0.1, 0.4), (0.4, 0.4), (0.2, 0.5)]):
            ledger.append(t, "m", chosen, opt)
        df = ledger.to_dataframe()
        assert list(df.columns) == LEDGER_COLUMNS
        assert df["cumulative_regret"].iloc[-1] == pytest.approx(0.6)
        assert df["moving_avg"].iloc[-1] == pytest.approx(0.15)
        ledger.export_csv(tmp_path / "ledger.csv")
        assert len(pd.read_csv(tmp_path / "ledger.csv")) == 3

    def test_window_must_be_positive(self):
        """Test a zero window is rejected."""
        with pytest.raises(InvalidInputError):
            RegretLedger(window=0)


class TestSummaries:
    """Tests for cross-repetition summaries"""

    def test_confidence_interval_half_width(self):
        """Test the 95% half-width uses 1.96 standard errors."""
        df = pd.DataFrame({"policy": ["a"] * 3 + ["b"] * 3, "regret": [1, 2, 3, 5, 5, 5]})
        summary = summarize_runs(df, ["policy"], ["regret"]).set_index("policy")
        assert summary.loc["a", "regret_mean"] == pytest.approx(2.0)
        assert summary.loc["a", "regret_std"] == pytest.approx(1.0)
        assert summary.loc["a", "regret_ci95"] == pytest.approx(1.96 / np.sqrt(3))
        assert summary.loc["b", "regret_ci95"] == 0.0
        assert summary.loc["b", "reps"] == 3

    def test_decision_record_ignores_unknown_fields(self):
        """Test decision records load with extra fields present."""
        record = DecisionRecord(
            step=0, query_id="q0", arm_id="m", context=[1.0], task="summarization",
            cluster=0, complexity_bin=1, reward=0.2,
        )
        data = record.to_dict()
        data["extra"] = "ignored"
        assert DecisionRecord.from_dict(data) == record
