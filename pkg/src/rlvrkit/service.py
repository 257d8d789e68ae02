"""Stateless HTTP reward service for scoring RL rollout batches.

Wraps the reward engine behind ``POST /v1/reward`` so external trainers
can score rollouts over the wire.  Validation is atomic: a batch with any
invalid item is rejected whole, naming the first bad index, so a trainer
can never train on a partially scored batch.  Scoring is exactly the
in-process :func:`rlvrkit.rewards.total_reward`, item by item, with
response order matching request order.
"""

from __future__ import annotations

import time
from typing import List, Optional, Union

import uvicorn
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .rewards import (
    DEFAULT_FORMAT_SPEC,
    DEFAULT_WEIGHTS,
    FormatSpec,
    RewardWeights,
    TaskKind,
    evaluate_arithmetic,
    parse_ground_truth,
    total_reward,
)

DEFAULT_BATCH_CAP = 1024
DEFAULT_PAYLOAD_CAP = 32 * 1024 * 1024


class FormatSpecModel(BaseModel):
    reasoning_open_tag: str = "<think>"
    reasoning_close_tag: str = "</think>"
    answer_open_tag: str = "<answer>"
    answer_close_tag: str = "</answer>"
    require_reasoning: bool = True
    require_answer: bool = True

    def to_spec(self) -> FormatSpec:
        return FormatSpec(**self.model_dump())


class WeightsModel(BaseModel):
    w_format: float
    w_acc: float

    def to_weights(self) -> RewardWeights:
        return RewardWeights(self.w_format, self.w_acc)


class OptionModel(BaseModel):
    letter: str
    text: str


class RewardItemModel(BaseModel):
    output: str
    task_kind: str
    ground_truth: Union[str, List[float]]
    options: Optional[List[OptionModel]] = None
    format_spec: Optional[FormatSpecModel] = None
    weights: Optional[WeightsModel] = None


class RewardRequestModel(BaseModel):
    items: List[RewardItemModel]


class BreakdownModel(BaseModel):
    format_reward: int
    accuracy_reward: float
    total: float
    extracted_answer: Optional[str] = None


class RewardResponseModel(BaseModel):
    breakdowns: List[BreakdownModel]
    version: str
    latency_ms: float


def _parse_item(
    item: RewardItemModel,
    default_spec: FormatSpec,
    default_weights: RewardWeights,
) -> tuple:
    gt = parse_ground_truth(
        item.task_kind,
        item.ground_truth,
        [o.model_dump() for o in item.options] if item.options is not None else None,
    )
    if gt.kind is TaskKind.MATH:
        # surface a malformed math ground truth at validation time
        evaluate_arithmetic(str(gt.value))
    spec = item.format_spec.to_spec() if item.format_spec else default_spec
    weights = item.weights.to_weights() if item.weights else default_weights
    return gt, spec, weights


def score_batch(
    request: RewardRequestModel,
    default_spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    default_weights: RewardWeights = DEFAULT_WEIGHTS,
    batch_cap: int = DEFAULT_BATCH_CAP,
) -> RewardResponseModel:
    """Validate the whole batch, then score each item independently.

    Raises HTTPException(400) naming the first invalid item; a valid
    request yields breakdowns positionally aligned with the items.
    """
    started = time.perf_counter()
    if not request.items:
        raise HTTPException(status_code=400, detail="items must not be empty")
    if len(request.items) > batch_cap:
        raise HTTPException(
            status_code=400,
            detail=f"batch of {len(request.items)} exceeds cap of {batch_cap}",
        )
    parsed = []
    for i, item in enumerate(request.items):
        try:
            parsed.append(_parse_item(item, default_spec, default_weights))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=f"item {i}: {exc}")
    breakdowns = []
    for item, (gt, spec, weights) in zip(request.items, parsed):
        b = total_reward(item.output, gt, spec, weights)
        breakdowns.append(
            BreakdownModel(
                format_reward=b.format_reward,
                accuracy_reward=b.accuracy_reward,
                total=b.total,
                extracted_answer=b.extracted_answer,
            )
        )
    return RewardResponseModel(
        breakdowns=breakdowns,
        version=__version__,
        latency_ms=(time.perf_counter() - started) * 1000.0,
    )


def create_app(
    default_spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    default_weights: RewardWeights = DEFAULT_WEIGHTS,
    batch_cap: int = DEFAULT_BATCH_CAP,
    payload_cap: int = DEFAULT_PAYLOAD_CAP,
) -> FastAPI:
    app = FastAPI(title="rlvrkit reward service", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def _validation_to_400(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.middleware("http")
    async def _payload_gate(request: Request, call_next):
        length = request.headers.get("content-length")
        if length is not None and int(length) > payload_cap:
            return JSONResponse(
                status_code=413,
                content={"detail": f"payload exceeds cap of {payload_cap} bytes"},
            )
        return await call_next(request)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/v1/reward", response_model=RewardResponseModel)
    def reward(request: RewardRequestModel) -> RewardResponseModel:
        return score_batch(request, default_spec, default_weights, batch_cap)

    return app


def serve(
    bind: str = "127.0.0.1:8000",
    default_spec: FormatSpec = DEFAULT_FORMAT_SPEC,
    default_weights: RewardWeights = DEFAULT_WEIGHTS,
    batch_cap: int = DEFAULT_BATCH_CAP,
    payload_cap: int = DEFAULT_PAYLOAD_CAP,
) -> None:
    """Run the service until terminated; uvicorn drains in-flight requests."""
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {bind!r}")
    app = create_app(default_spec, default_weights, batch_cap, payload_cap)
    uvicorn.run(app, host=host, port=int(port), log_level="info")
