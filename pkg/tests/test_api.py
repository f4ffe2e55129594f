#!/usr/bin/env python3
"""
Unit tests for FastAPI endpoints.
Tests API routes, response formats, and error handling.
"""

import os
import sys

import pytest
from fastapi.testclient import TestClient

# Add paths
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from backend.router_api import create_app
from backend.router_service import RouterConfig, RouterService, build_service_pipeline
from ml_engine.model_pool import default_pool
from ml_engine.query_stream import TASK_LABELS, QueryStream, generate_queries

PROMPTS = [q.text for q in generate_queries(QueryStream(horizon=10, seed=3))]


@pytest.fixture
def service():
    config = RouterConfig()
    return RouterService(
        config, pool=default_pool(), pipeline=build_service_pipeline(config.features)
    )


@pytest.fixture
def client(service):
    """Create test client"""
    with TestClient(create_app(service)) as client:
        yield client


class TestHealthEndpoints:
    """Tests for health check endpoints"""

    def test_health_endpoint(self, client):
        """Test the health endpoint reports a healthy service."""
        response = client.get("/healthz")
        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "healthy"
        assert data["router_ready"] is True
        assert data["active_models"] == 16

    def test_metrics_endpoint(self, client):
        """Test the Prometheus endpoint exposes router counters."""
        client.post("/route", json={"request_id": "m1", "text": PROMPTS[0]})
        response = client.get("/metrics")
        assert response.status_code == 200
        assert "router_route_requests_total" in response.text
        assert "router_pending_decisions 1.0" in response.text


class TestRouteEndpoints:
    """Tests for /route and /feedback"""

    def test_route_then_feedback(self, client):
        """Test a routed request finalizes on feedback."""
        response = client.post("/route", json={"request_id": "a1", "text": PROMPTS[0]})
        assert response.status_code == 200
        data = response.json()
        assert data["request_id"] == "a1"
        assert data["model_id"] in data["feasible"]
        assert data["context"]["task"] in TASK_LABELS
        assert data["decision_latency_ms"] >= 0

        response = client.post(
            "/feedback",
            json={"request_id": "a1", "accuracy_raw": 0.8, "energy_wh": 0.01, "latency_ms": 120},
        )
        assert response.status_code == 200
        ack = response.json()
        assert ack["status"] == "finalized"
        assert ack["model_id"] == data["model_id"]

    def test_error_statuses(self, client):
        """Test service and validation errors map to their HTTP statuses."""
        assert client.post("/route", json={"request_id": "e1", "text": " "}).status_code == 400
        assert client.post(
            "/route", json={"request_id": "e1", "text": PROMPTS[0], "lambda_override": 2}
        ).status_code == 422
        assert client.post("/route", json={"request_id": "e1", "text": PROMPTS[0]}).status_code == 200
        assert client.post("/route", json={"request_id": "e1", "text": PROMPTS[1]}).status_code == 409

        report = {"request_id": "e1", "accuracy_raw": 0.5, "energy_wh": 0.01, "latency_ms": 10}
        assert client.post("/feedback", json=report).status_code == 200
        assert client.post("/feedback", json=report).status_code == 409
        missing = dict(report, request_id="nobody")
        assert client.post("/feedback", json=missing).status_code == 404
        assert client.post("/feedback", json=dict(report, energy_wh=-1)).status_code == 422

    def test_stats(self, client):
        """Test stats reflect routed and finalized requests."""
        for i, text in enumerate(PROMPTS[:4]):
            client.post("/route", json={"request_id": f"s{i}", "text": text})
        client.post(
            "/feedback",
            json={"request_id": "s0", "accuracy_raw": 0.9, "energy_wh": 0.01, "latency_ms": 10},
        )
        stats = client.get("/stats").json()
        assert stats["routed"] == 4
        assert stats["finalized"] == 1
        assert stats["pending"] == 3
        assert stats["total_pulls"] == 1
        assert len(stats["active_models"]) == 16


class TestPoolEndpoint:
    """Tests for /pool"""

    def test_add_and_deactivate(self, client):
        """Test pool churn over HTTP updates the active models."""
        model = {
            "id": "api-test-model",
            "family": "test",
            "params_b": 2.0,
            "tokens_per_sec": 60,
            "max_new_tokens": {task: 32 for task in TASK_LABELS},
            "energy_per_token_wh": 4e-5,
            "energy_base_wh": 0.004,
        }
        response = client.post("/pool", json={"op": "add", "model": model})
        assert response.status_code == 200
        assert "api-test-model" in response.json()["active_models"]

        response = client.post("/pool", json={"op": "deactivate", "model_id": "api-test-model"})
        assert response.status_code == 200
        assert "api-test-model" not in response.json()["active_models"]

    def test_pool_errors(self, client):
        """Test malformed churn payloads are rejected."""
        assert client.post("/pool", json={"op": "add", "model": {"id": "x"}}).status_code == 400
        assert client.post("/pool", json={"op": "deactivate", "model_id": "gpt-x"}).status_code == 404
        assert client.post("/pool", json={"op": "rename", "model_id": "qwen2.5-7b"}).status_code == 422


class TestLifespan:
    """Tests for startup from a config file"""

    def test_checkpoint_written_on_shutdown(self, tmp_path):
        """Test the lifespan writes a checkpoint on shutdown."""
        config = RouterConfig(checkpoint_path=str(tmp_path / "policy.json"))
        service = RouterService(
            config, pool=default_pool(), pipeline=build_service_pipeline(config.features)
        )
        with TestClient(create_app(service)) as client:
            client.post("/route", json={"request_id": "c1", "text": PROMPTS[0]})
        assert (tmp_path / "policy.json").exists()

    def test_loads_config_file(self, tmp_path):
        """Test the app reads its settings from a config file."""
        path = tmp_path / "router.json"
        path.write_text(RouterConfig(lam=0.7).model_dump_json())
        with TestClient(create_app(config_path=path)) as client:
            assert client.get("/stats").json()["lam"] == 0.7
