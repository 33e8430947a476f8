"""JSON-over-HTTP service exposing the lab's calculators.

All endpoints are stateless, read-only computations over the shared core;
the CLI calls the same handler functions, so both paths serialize
byte-identical JSON. Structural/JSON errors return 400; domain invariant
violations return 422 with the validation report.
"""
from __future__ import annotations

import json
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ValidationError

from . import __version__
from .fixtures import FIXTURE_NAMES, load_fixture
from .layout import LayoutArityError, LayoutSyntaxError, parse_layout, render_layout
from .memory import estimate
from .model import (
    TrainingJobSpec,
    canonical_json,
    spec_digest,
    validate_job,
)
from .perf import LatencyTable, calibrate, cost_report
from .planners import dynamic_cp_plan, echo_plan
from .schedule import DEFAULT_COSTS, SymbolCost, fwd_bwd_pairs, simulate

SCHEMA_VERSION = 1


class SimulateRequest(BaseModel):
    layout: str
    pp: int
    vpp: int = 1
    num_microbatches: int
    costs: Optional[dict[str, dict[str, float]]] = None
    schedule_kind: str = "1F1B"
    extra_warmup: bool = False
    wd_split: bool = False
    include_events: bool = True


class DynamicCpRequest(BaseModel):
    lengths: list[int]
    memory_budget_tokens: int
    dp: int = 1
    cp_max: int = 1
    pp: int = 1


class EchoRequest(BaseModel):
    counts: list[int]
    experts_per_rank: int = 1
    spare_slots_per_rank: int = 1


class ApiError(Exception):
    def __init__(self, status: int, diagnostics: list):
        self.status = status
        self.diagnostics = diagnostics


def _respond(request_payload: Any, result: Any, diagnostics: list | None = None) -> dict:
    digest = spec_digest(request_payload) if isinstance(request_payload, TrainingJobSpec) else None
    return {
        "schema_version": SCHEMA_VERSION,
        "request_digest": digest,
        "diagnostics": diagnostics or [],
        "result": result,
    }


def _load_spec(payload: dict) -> TrainingJobSpec:
    try:
        spec = TrainingJobSpec.model_validate(payload)
    except ValidationError as exc:
        raise ApiError(400, [str(e["msg"]) + " @ " + ".".join(map(str, e["loc"]))
                             for e in exc.errors()])
    violations = validate_job(spec)
    if violations:
        raise ApiError(422, [v.model_dump() for v in violations])
    return spec


# -- handlers shared by CLI and HTTP ------------------------------------------

def handle_estimate(payload: dict) -> dict:
    spec = _load_spec(payload)
    try:
        return _respond(spec, estimate(spec).as_dict())
    except (ValueError, LayoutSyntaxError, LayoutArityError) as exc:
        raise ApiError(422, [str(exc)])


def handle_cost(payload: dict) -> dict:
    spec = _load_spec(payload)
    try:
        return _respond(spec, cost_report(spec))
    except (ValueError, LayoutSyntaxError, LayoutArityError) as exc:
        raise ApiError(422, [str(exc)])


def handle_advise(payload: dict) -> dict:
    spec = _load_spec(payload)
    from .perf import advisor

    return _respond(spec, [r.as_dict() for r in advisor(spec)])


def handle_simulate(payload: dict) -> dict:
    try:
        req = SimulateRequest.model_validate(payload)
    except ValidationError as exc:
        raise ApiError(400, [str(e["msg"]) for e in exc.errors()])
    try:
        layout = parse_layout(req.layout).bind(req.pp, req.vpp)
        costs = dict(DEFAULT_COSTS)
        for sym, c in (req.costs or {}).items():
            costs[sym] = SymbolCost(**c)
        sched = simulate(
            layout, costs, req.num_microbatches,
            schedule_kind=req.schedule_kind,
            extra_warmup=req.extra_warmup,
            wd_split=req.wd_split,
        )
    except (LayoutSyntaxError, LayoutArityError, ValueError) as exc:
        raise ApiError(422, [str(exc)])
    result = sched.as_dict()
    result["layout_canonical"] = render_layout(layout)
    result["merge_pairs"] = fwd_bwd_pairs(sched)
    if not req.include_events:
        result.pop("events")
    return _respond(payload, result)


def handle_plan_dynamic_cp(payload: dict) -> dict:
    try:
        req = DynamicCpRequest.model_validate(payload)
    except ValidationError as exc:
        raise ApiError(400, [str(e["msg"]) for e in exc.errors()])
    try:
        plan = dynamic_cp_plan(req.lengths, req.memory_budget_tokens,
                               req.dp, req.cp_max, req.pp)
    except ValueError as exc:
        raise ApiError(422, [str(exc)])
    return _respond(payload, plan.as_dict())


def handle_plan_echo(payload: dict) -> dict:
    try:
        req = EchoRequest.model_validate(payload)
    except ValidationError as exc:
        raise ApiError(400, [str(e["msg"]) for e in exc.errors()])
    try:
        plan = echo_plan(req.counts, req.experts_per_rank, req.spare_slots_per_rank)
    except ValueError as exc:
        raise ApiError(422, [str(exc)])
    return _respond(payload, plan.as_dict())


def handle_calibrate(csv_text: str) -> dict:
    table = LatencyTable.from_csv(csv_text)
    fits = calibrate(table)
    result = {
        f"{kind}/{platform}": {"alpha_s": ab.alpha, "beta_bytes_per_s": ab.beta}
        for (kind, platform), ab in sorted(fits.items())
    }
    return _respond(None, result)


def handle_fixtures() -> dict:
    return _respond(None, {
        "fixtures": [
            {"name": name, "spec": load_fixture(name).model_dump(mode="json")}
            for name in FIXTURE_NAMES
        ]
    })


# -- FastAPI app ---------------------------------------------------------------

def create_app() -> FastAPI:
    app = FastAPI(
        title="moelab",
        description="Desk-scale MoE training-systems laboratory",
        version=__version__,
    )

    @app.exception_handler(ApiError)
    async def api_error_handler(_: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={
                "schema_version": SCHEMA_VERSION,
                "diagnostics": exc.diagnostics,
                "result": None,
            },
        )

    @app.exception_handler(RequestValidationError)
    async def body_error_handler(_: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={
                "schema_version": SCHEMA_VERSION,
                "diagnostics": [str(e.get("msg", "invalid body")) for e in exc.errors()],
                "result": None,
            },
        )

    def canonical(payload: dict) -> Response:
        return Response(content=canonical_json(payload), media_type="application/json")

    @app.get("/health")
    async def health():
        return {"status": "ok", "service": "moelab", "version": __version__}

    @app.post("/api/v1/estimate")
    async def estimate_endpoint(request: Request):
        return canonical(handle_estimate(await _json_body(request)))

    @app.post("/api/v1/cost")
    async def cost_endpoint(request: Request):
        return canonical(handle_cost(await _json_body(request)))

    @app.post("/api/v1/advise")
    async def advise_endpoint(request: Request):
        return canonical(handle_advise(await _json_body(request)))

    @app.post("/api/v1/simulate")
    async def simulate_endpoint(request: Request):
        return canonical(handle_simulate(await _json_body(request)))

    @app.post("/api/v1/plan/dynamic-cp")
    async def dynamic_cp_endpoint(request: Request):
        return canonical(handle_plan_dynamic_cp(await _json_body(request)))

    @app.post("/api/v1/plan/echo")
    async def echo_endpoint(request: Request):
        return canonical(handle_plan_echo(await _json_body(request)))

    @app.get("/api/v1/fixtures")
    async def fixtures_endpoint():
        return canonical(handle_fixtures())

    return app


async def _json_body(request: Request) -> dict:
    try:
        return json.loads(await request.body())
    except json.JSONDecodeError as exc:
        raise ApiError(400, [f"malformed JSON: {exc}"])


app = create_app()
