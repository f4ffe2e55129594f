#!/usr/bin/env python3
"""
FastAPI server for the ecoroute router.
POST /route picks a model for a prompt, POST /feedback reports what serving
it cost, POST /pool adds or deactivates models. GET /stats, /healthz and
/metrics expose the learner's state.
"""

import logging
import time
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from prometheus_client import (
    CONTENT_TYPE_LATEST,
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
)
from pydantic import BaseModel, Field

from backend.router_service import RouterConfig, RouterService, ServiceError

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


class RouteRequest(BaseModel):
    request_id: str = Field(..., min_length=1)
    text: str
    l_max_ms: Optional[float] = Field(None, gt=0)
    lambda_override: Optional[float] = Field(None, ge=0, le=1)

    model_config = {
        "json_schema_extra": {
            "example": {
                "request_id": "req-1",
                "text": "Solve the following grade school math word problem.\n...",
                "l_max_ms": 2000,
            }
        }
    }


class ContextBreakdown(BaseModel):
    task: str
    cluster: int
    complexity_bin: int
    flesch: float


class RouteResponse(BaseModel):
    model_config = {"protected_namespaces": ()}

    request_id: str
    model_id: str
    context: ContextBreakdown
    scores: Dict[str, float]
    feasible: List[str]
    exploration: bool
    decision_latency_ms: float


class FeedbackReport(BaseModel):
    request_id: str = Field(..., min_length=1)
    accuracy_raw: float
    metric: Optional[str] = None
    energy_wh: float = Field(..., ge=0)
    latency_ms: float = Field(..., ge=0)


class FeedbackAck(BaseModel):
    model_config = {"protected_namespaces": ()}

    request_id: str
    model_id: str
    reward: float
    metric: Optional[str] = None
    status: str


class PoolRequest(BaseModel):
    """op=add carries `model`, op=deactivate carries `model_id`."""

    model_config = {"protected_namespaces": ()}

    op: Literal["add", "deactivate"]
    model: Optional[Dict[str, Any]] = None
    model_id: Optional[str] = None


class PoolAck(BaseModel):
    model_config = {"protected_namespaces": ()}

    op: str
    model_id: str
    active_models: List[str]


class RouterMetrics:
    """Prometheus collectors on a registry owned by one app."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.routes = Counter(
            "router_route_requests_total", "Routing decisions made", ["model"],
            registry=self.registry,
        )
        self.feedback = Counter(
            "router_feedback_total", "Feedback reports finalized", registry=self.registry
        )
        self.errors = Counter(
            "router_errors_total", "Requests rejected", ["endpoint", "status"],
            registry=self.registry,
        )
        self.decision_latency = Histogram(
            "router_decision_latency_seconds",
            "Route latency excluding embedding time",
            buckets=(0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1),
            registry=self.registry,
        )
        self.pending = Gauge(
            "router_pending_decisions", "Decisions awaiting feedback", registry=self.registry
        )


def create_app(service: Optional[RouterService] = None, config_path=None) -> FastAPI:
    metrics = RouterMetrics()
    started = time.time()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info("🚀 Starting ecoroute router...")
        if service is not None:
            app.state.service = service
        else:
            try:
                app.state.service = RouterService(RouterConfig.load(config_path))
            except Exception as e:
                logger.error(f"❌ Failed to initialize router: {e}")
                raise
        logger.info("✅ Router initialized")

        yield

        logger.info("🛑 Shutting down ecoroute router...")
        svc = app.state.service
        if svc.checkpoint_path is not None:
            svc.checkpoint()
        app.state.service = None

    app = FastAPI(
        title="ecoroute",
        description="Context-aware, energy-aware model routing",
        version="1.0.0",
        lifespan=lifespan,
    )
    app.state.service = None
    app.state.metrics = metrics
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def get_service() -> RouterService:
        if app.state.service is None:
            raise HTTPException(status_code=503, detail="Router not initialized")
        return app.state.service

    def fail(endpoint: str, e: ServiceError):
        metrics.errors.labels(endpoint=endpoint, status=str(e.status_code)).inc()
        raise HTTPException(status_code=e.status_code, detail=str(e))

    @app.post("/route", response_model=RouteResponse)
    def route(req: RouteRequest):
        svc = get_service()
        try:
            decision = svc.route(req.request_id, req.text, req.l_max_ms, req.lambda_override)
        except ServiceError as e:
            fail("route", e)
        metrics.routes.labels(model=decision.model_id).inc()
        metrics.decision_latency.observe(decision.decision_latency_ms / 1000)
        return RouteResponse(
            request_id=decision.request_id,
            model_id=decision.model_id,
            context=ContextBreakdown(**decision.context),
            scores=decision.scores,
            feasible=decision.feasible,
            exploration=decision.exploration,
            decision_latency_ms=decision.decision_latency_ms,
        )

    @app.post("/feedback", response_model=FeedbackAck)
    def feedback(report: FeedbackReport):
        svc = get_service()
        try:
            ack = svc.feedback(
                report.request_id,
                report.accuracy_raw,
                report.energy_wh,
                report.latency_ms,
                metric=report.metric,
            )
        except ServiceError as e:
            fail("feedback", e)
        metrics.feedback.inc()
        return FeedbackAck(**ack)

    @app.post("/pool", response_model=PoolAck)
    def pool(req: PoolRequest):
        svc = get_service()
        payload = req.model if req.op == "add" else req.model_id
        try:
            return PoolAck(**svc.pool_churn(req.op, payload))
        except ServiceError as e:
            fail("pool", e)

    @app.get("/stats")
    def stats():
        return get_service().stats()

    @app.get("/healthz")
    def healthz():
        svc = app.state.service
        return {
            "status": "healthy" if svc is not None else "starting",
            "router_ready": svc is not None,
            "active_models": len(svc.pool.active_ids()) if svc is not None else 0,
            "uptime_seconds": time.time() - started,
            "timestamp": datetime.now().isoformat(),
        }

    @app.get("/metrics")
    def prometheus_metrics():
        if app.state.service is not None:
            metrics.pending.set(app.state.service.pending_count())
        return Response(generate_latest(metrics.registry), media_type=CONTENT_TYPE_LATEST)

    return app


app = create_app()
