"""Northbound JSON API over a live engine.

Every request names its caller in ``X-Stakeholder-Id``. Authorization
follows the engine's business scenario; a Deny becomes 403 with the reason.
"""

from __future__ import annotations

from typing import Any

from fastapi import FastAPI, Header, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from aiora.errors import (
    AioraError,
    ContinuumNotActive,
    Infeasible,
    MigrationInProgress,
    TopologyError,
    Unauthorized,
    UnknownApplication,
    UnknownContinuum,
    UnknownEES,
    UnknownSegment,
    UnknownZone,
)
from aiora.exposure import DiscoveryFilter, DuplicateRecord, authorize_operation
from aiora.lifecycle import ContinuumRequest, ContinuumState
from aiora.placement import ApplicationDescriptor, ObjectiveWeights
from aiora.sim.engine import Engine

_NOT_FOUND = (UnknownContinuum, UnknownApplication, UnknownEES, UnknownSegment, UnknownZone)
_CONFLICT = (ContinuumNotActive, Infeasible, DuplicateRecord, MigrationInProgress)


def _status(exc: AioraError) -> int:
    if isinstance(exc, Unauthorized):
        return 403
    if isinstance(exc, _NOT_FOUND):
        return 404
    if isinstance(exc, _CONFLICT):
        return 409
    if isinstance(exc, (TopologyError, ValueError)):
        return 400
    return 500


def create_app(engine: Engine) -> FastAPI:
    engine.setup()
    app = FastAPI(title="aiora", version="0.1.0")
    scenario = engine.cfg.scenario
    known = set(engine.topology.stakeholder_map)

    @app.exception_handler(AioraError)
    async def _aiora_error(_: Request, exc: AioraError) -> JSONResponse:
        body: dict[str, Any] = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, Unauthorized):
            body["reason"] = exc.reason
        if isinstance(exc, Infeasible):
            body["blocking"] = exc.kinds
        return JSONResponse(body, status_code=_status(exc))

    @app.exception_handler(RequestValidationError)
    async def _bad_request(_: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse({"error": "BadRequest", "detail": str(exc.errors())}, status_code=400)

    @app.exception_handler(HTTPException)
    async def _http_error(_: Request, exc: HTTPException) -> JSONResponse:
        detail = exc.detail if isinstance(exc.detail, dict) else {"detail": exc.detail}
        return JSONResponse(detail, status_code=exc.status_code)

    def caller(stakeholder: str | None) -> str:
        if not stakeholder:
            raise HTTPException(400, {"error": "BadRequest", "detail": "missing X-Stakeholder-Id header"})
        if stakeholder not in known:
            raise HTTPException(403, {"error": "Unauthorized", "reason": "unknown stakeholder"})
        return stakeholder

    def require(actor: str, op_name: str) -> None:
        decision = authorize_operation(actor, op_name, scenario, known)
        if not decision:
            raise Unauthorized(decision.reason)

    def body_error(exc: Exception) -> HTTPException:
        return HTTPException(400, {"error": "BadRequest", "detail": str(exc)})

    @app.post("/continuums", status_code=201)
    def create_continuum(
        body: dict[str, Any], x_stakeholder_id: str | None = Header(default=None)
    ) -> dict[str, Any]:
        actor = caller(x_stakeholder_id)
        require(actor, "create_continuum")
        activate = bool(body.get("activate", True))
        if activate:
            require(actor, "transition_continuum")
        try:
            req = ContinuumRequest.from_dict({**body, "provider": actor}, scenario)
        except (KeyError, TypeError, ValueError) as exc:
            raise body_error(exc) from exc
        with engine.lock:
            engine.lifecycle.create_continuum(req)
            if activate:
                engine.lifecycle.transition(req.id, ContinuumState.INSTANTIATED)
                engine.lifecycle.transition(req.id, ContinuumState.ACTIVE)
            cont = engine.lifecycle.continuum(req.id)
            return {
                "id": cont.id,
                "state": cont.state.value,
                "business_provider": cont.business_provider,
                "quota": {k: v.to_dict() for k, v in engine.lifecycle.quota(cont.id).items()},
            }

    @app.post("/continuums/{cid}/apps", status_code=201)
    def deploy(
        cid: str, body: dict[str, Any], x_stakeholder_id: str | None = Header(default=None)
    ) -> dict[str, Any]:
        actor = caller(x_stakeholder_id)
        require(actor, "deploy_application")
        try:
            descriptor = ApplicationDescriptor.from_dict(body["app"])
            weights = ObjectiveWeights.from_dict(body.get("weights", {"w_latency": 1.0}))
        except (KeyError, TypeError, ValueError) as exc:
            raise body_error(exc) from exc
        with engine.lock:
            rec = engine.lifecycle.deploy_application(cid, descriptor, weights)
            return {
                "continuum": cid,
                "app": rec.app_id,
                "assignment": dict(sorted(rec.plan.assignment.items())),
                "cost": rec.plan.cost.to_dict(),
            }

    @app.post("/ees", status_code=201)
    def register_ees(body: dict[str, Any], x_stakeholder_id: str | None = Header(default=None)) -> dict[str, Any]:
        actor = caller(x_stakeholder_id)
        try:
            args = (str(body["continuum"]), str(body["id"]), str(body["segment"]), list(body.get("capabilities", [])))
        except (KeyError, TypeError) as exc:
            raise body_error(exc) from exc
        with engine.lock:
            return engine.edge.register_ees(actor, *args).to_dict()

    @app.post("/eas", status_code=201)
    def register_eas(body: dict[str, Any], x_stakeholder_id: str | None = Header(default=None)) -> dict[str, Any]:
        actor = caller(x_stakeholder_id)
        try:
            args = (
                str(body["ees"]),
                str(body["id"]),
                str(body["segment"]),
                list(body.get("capabilities", [])),
                body.get("app"),
            )
        except (KeyError, TypeError) as exc:
            raise body_error(exc) from exc
        with engine.lock:
            return engine.edge.register_eas(actor, *args).to_dict()

    @app.get("/ecs/provision")
    def provision(zone: str = Query(...), x_stakeholder_id: str | None = Header(default=None)) -> dict[str, Any]:
        caller(x_stakeholder_id)
        with engine.lock:
            return engine.edge.provision_client(zone).to_dict()

    @app.get("/eas")
    def discover(
        ees: str = Query(...),
        capability: list[str] = Query(default=[]),
        maxLatencyMs: float | None = Query(default=None),  # noqa: N803 - wire name
        zone: str | None = Query(default=None),
        x_stakeholder_id: str | None = Header(default=None),
    ) -> dict[str, Any]:
        caller(x_stakeholder_id)
        flt = DiscoveryFilter(frozenset(capability), maxLatencyMs, zone)
        with engine.lock:
            return {"ees": ees, "eas": [r.to_dict() for r in engine.edge.discover_eas(ees, flt)]}

    @app.get("/twin/snapshot")
    def snapshot(x_stakeholder_id: str | None = Header(default=None)) -> dict[str, Any]:
        caller(x_stakeholder_id)
        return engine.current_snapshot().to_dict()

    @app.get("/broker/utilization")
    def utilization(x_stakeholder_id: str | None = Header(default=None)) -> dict[str, Any]:
        caller(x_stakeholder_id)
        with engine.lock:
            return {
                "segments": {sid: u.to_dict() for sid, u in engine.broker.utilization_report().items()},
                "online": {sid: engine.broker.is_online(sid) for sid in engine.broker.segment_ids()},
            }

    return app
