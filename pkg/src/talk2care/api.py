"""HTTP surface, versioned under /v1.

Bearer-token auth with two roles: patients reach only their own sessions,
providers reach the review surface. POST/PUT requests carrying an
Idempotency-Key header are replayed from a response cache on retry instead
of re-executing. Provider notifications stream out as server-sent events.
"""

import asyncio
import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel
from starlette.datastructures import Headers

from .domain import (
    ActionKind,
    ConversationProtocol,
    Initiator,
    PatientProfile,
    ProviderAction,
    SessionStatus,
    risk_color,
    utc_now,
)
from .engine import ConversationEngine
from .errors import (
    ConfigurationError,
    ConflictError,
    NotFoundError,
    PreconditionError,
    Talk2CareError,
    ValidationError,
)
from .gateway import GatewayError
from .pipeline import ProviderPipeline
from .store import EncryptedStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Principal:
    role: str  # "patient" | "provider"
    subject_id: str


def tokens_from_env() -> dict[str, Principal]:
    """Parse AUTH_TOKENS: {"patients": {token: id}, "providers": {token: id}}."""
    raw = os.environ.get("AUTH_TOKENS")
    if not raw:
        return {}
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"AUTH_TOKENS is not valid JSON: {exc}") from exc
    tokens: dict[str, Principal] = {}
    for token, patient_id in parsed.get("patients", {}).items():
        tokens[token] = Principal("patient", patient_id)
    for token, provider_id in parsed.get("providers", {}).items():
        tokens[token] = Principal("provider", provider_id)
    return tokens


class CreateSessionBody(BaseModel):
    patient_id: str
    protocol_id: str
    initiator: str | None = None


class TurnBody(BaseModel):
    text: str


class ActionBody(BaseModel):
    kind: str
    body: str = ""


class IdempotencyMiddleware:
    """Replays cached responses for POST/PUT requests retried with the same
    Idempotency-Key. Pure ASGI so streaming responses pass through untouched.
    """

    def __init__(self, app, cache: dict, lock: threading.Lock):
        self.app = app
        self.cache = cache
        self.lock = lock

    async def __call__(self, scope, receive, send):
        if scope["type"] != "http" or scope["method"] not in ("POST", "PUT"):
            await self.app(scope, receive, send)
            return
        key = Headers(scope=scope).get("idempotency-key")
        if not key:
            await self.app(scope, receive, send)
            return

        cache_key = (scope["method"], scope["path"], key)
        with self.lock:
            cached = self.cache.get(cache_key)
        if cached is not None:
            status, headers, body = cached
            await send({
                "type": "http.response.start",
                "status": status,
                "headers": headers + [(b"x-idempotent-replay", b"true")],
            })
            await send({"type": "http.response.body", "body": body})
            return

        captured: dict = {"status": None, "headers": [], "chunks": []}

        async def capture(message):
            if message["type"] == "http.response.start":
                captured["status"] = message["status"]
                captured["headers"] = list(message.get("headers", []))
            elif message["type"] == "http.response.body":
                captured["chunks"].append(message.get("body", b""))
                if not message.get("more_body", False) and captured["status"] is not None:
                    # 5xx responses stay uncached so a retry can actually retry
                    if captured["status"] < 500:
                        record = (captured["status"], captured["headers"],
                                  b"".join(captured["chunks"]))
                        with self.lock:
                            self.cache[cache_key] = record
            await send(message)

        await self.app(scope, receive, capture)


def create_app(store: EncryptedStore, engine: ConversationEngine,
               pipeline: ProviderPipeline, tokens: dict[str, Principal],
               auto_process: bool = False, heartbeat_s: float = 15.0,
               ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(
        title="Talk2Care",
        version="1.0",
        openapi_url="/v1/openapi",
        docs_url="/v1/docs",
    )

    idempotency_cache: dict[tuple[str, str, str], tuple[int, bytes, list]] = {}
    idempotency_lock = threading.Lock()

    # -- auth ---------------------------------------------------------------

    def authenticate(request: Request) -> Principal:
        header = request.headers.get("authorization", "")
        if not header.startswith("Bearer "):
            raise HTTPException(401, "missing bearer token")
        principal = tokens.get(header[len("Bearer "):])
        if principal is None:
            raise HTTPException(401, "unknown token")
        return principal

    def require_provider(principal: Principal = Depends(authenticate)) -> Principal:
        if principal.role != "provider":
            raise HTTPException(403, "provider role required")
        return principal

    def check_session_access(session_id: str, principal: Principal):
        session = store.get_session(session_id)
        if principal.role == "patient" and session.patient_id != principal.subject_id:
            raise HTTPException(403, "not your session")
        return session

    # -- error mapping -------------------------------------------------------

    @app.exception_handler(Talk2CareError)
    def on_domain_error(request: Request, exc: Talk2CareError):
        if isinstance(exc, NotFoundError):
            status = 404
        elif isinstance(exc, ConflictError):
            status = 409
        elif isinstance(exc, (ValidationError, PreconditionError)):
            status = 422
        elif isinstance(exc, GatewayError):
            status = 502
        else:
            status = 500
        return JSONResponse({"detail": str(exc)}, status_code=status)

    # -- idempotency ----------------------------------------------------------

    app.add_middleware(IdempotencyMiddleware, cache=idempotency_cache,
                       lock=idempotency_lock)

    # -- liveness -------------------------------------------------------------

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    # -- patient-facing conversation ------------------------------------------

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: CreateSessionBody,
                       principal: Principal = Depends(authenticate)):
        if principal.role == "patient" and body.patient_id != principal.subject_id:
            raise HTTPException(403, "patients may only start their own sessions")
        initiator = body.initiator or (
            "patient" if principal.role == "patient" else "provider"
        )
        try:
            initiator = Initiator(initiator)
        except ValueError:
            raise HTTPException(422, "initiator must be one of: patient, provider")
        session = engine.start_session(body.patient_id, body.protocol_id, initiator)
        return session.to_dict()

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str, principal: Principal = Depends(authenticate)):
        return check_session_access(session_id, principal).to_dict()

    @app.post("/v1/sessions/{session_id}/turns")
    def post_turn(session_id: str, body: TurnBody,
                  principal: Principal = Depends(authenticate)):
        check_session_access(session_id, principal)
        reply = engine.patient_turn(session_id, body.text)
        session = store.get_session(session_id)
        if auto_process and session.status == SessionStatus.COMPLETED:
            try:
                pipeline.process_session(session_id)
            except Talk2CareError as exc:
                log.warning("auto-processing of %s failed: %s", session_id, exc)
        return {"reply": reply.to_dict(), "session": session.to_dict()}

    @app.post("/v1/sessions/{session_id}/close")
    def close_session(session_id: str, principal: Principal = Depends(authenticate)):
        check_session_access(session_id, principal)
        return engine.close(session_id).to_dict()

    # -- provider review surface ------------------------------------------------

    @app.get("/v1/provider/sessions")
    def list_sessions(status: str | None = None, risk: str | None = None,
                      patient_id: str | None = None, done: bool | None = None,
                      limit: int = 50, offset: int = 0,
                      principal: Principal = Depends(require_provider)):
        try:
            page = store.list_sessions(patient_id=patient_id, status=status,
                                       risk=risk, done=done, limit=limit, offset=offset)
        except ValueError as exc:
            raise HTTPException(422, f"bad filter: {exc}")
        return {
            "sessions": [_row_dict(row) for row in page.rows],
            "total": page.total,
            "limit": page.limit,
            "offset": page.offset,
        }

    def _row_dict(row) -> dict:
        session = row.session
        try:
            patient_name = store.get_patient(session.patient_id).name
        except NotFoundError:
            patient_name = "(unknown)"
        risk = store.get_risk(session.session_id)
        return {
            "session_id": session.session_id,
            "patient_id": session.patient_id,
            "patient_name": patient_name,
            "protocol_id": session.protocol_id,
            "initiator": session.initiator.value,
            "status": session.status.value,
            "created_at": session.to_dict()["created_at"],
            "closed_at": session.to_dict()["closed_at"],
            "turn_count": len(session.turns),
            "risk_level": row.risk_level.value if row.risk_level else None,
            "risk_color": risk_color(row.risk_level),
            "needs_human_review": bool(risk and risk.needs_human_review),
            "done": row.done,
        }

    @app.get("/v1/provider/sessions/{session_id}")
    def session_detail(session_id: str,
                       principal: Principal = Depends(require_provider)):
        session = store.get_session(session_id)
        try:
            patient = store.get_patient(session.patient_id).to_dict()
        except NotFoundError:
            patient = None
        try:
            protocol = store.get_protocol(session.protocol_id).to_dict()
        except NotFoundError:
            protocol = None
        summary = store.get_summary(session_id)
        highlights = store.get_highlights(session_id)
        risk = store.get_risk(session_id)
        risk_dict = None
        if risk is not None:
            risk_dict = risk.to_dict()
            risk_dict["color"] = risk_color(risk.level)
        return {
            "session": session.to_dict(),
            "patient": patient,
            "protocol": protocol,
            "summary": summary.to_dict() if summary else None,
            "highlights": highlights.to_dict() if highlights else None,
            "risk": risk_dict,
            "actions": [a.to_dict() for a in store.list_actions(session_id)],
            "done": store.session_done(session_id),
            "processing": store.get_processing(session_id),
        }

    @app.post("/v1/provider/sessions/{session_id}/actions", status_code=201)
    def add_action(session_id: str, body: ActionBody,
                   principal: Principal = Depends(require_provider)):
        store.get_session(session_id)
        try:
            kind = ActionKind(body.kind)
        except ValueError:
            raise HTTPException(
                422, f"kind must be one of: {', '.join(k.value for k in ActionKind)}"
            )
        action = ProviderAction(
            action_id=store.new_id(),
            session_id=session_id,
            kind=kind,
            body=body.body,
            author=principal.subject_id,
            created_at=utc_now(),
        )
        store.append_action(action)
        return action.to_dict()

    @app.post("/v1/provider/sessions/{session_id}/done")
    def mark_done(session_id: str,
                  principal: Principal = Depends(require_provider)):
        store.get_session(session_id)
        action = ProviderAction(
            action_id=store.new_id(),
            session_id=session_id,
            kind=ActionKind.MARK_DONE,
            body="",
            author=principal.subject_id,
            created_at=utc_now(),
        )
        store.append_action(action)
        return {"done": True, "action": action.to_dict()}

    @app.post("/v1/provider/sessions/{session_id}/process")
    def process_session(session_id: str, force: bool = False,
                        principal: Principal = Depends(require_provider)):
        return pipeline.process_session(session_id, force=force).to_dict()

    @app.get("/v1/provider/notifications")
    async def notifications(request: Request,
                            principal: Principal = Depends(require_provider)):
        replay_after = None
        last_id = request.headers.get("last-event-id")
        if last_id and last_id.isdigit():
            replay_after = int(last_id)
        subscription = pipeline.notifier.subscribe(replay_after)

        # Async polling instead of a thread parked on queue.get: cancellation
        # on client disconnect must be able to interrupt the wait.
        async def stream():
            try:
                yield ": connected\n\n"
                last_beat = time.monotonic()
                while True:
                    try:
                        event = subscription.get_nowait()
                    except queue.Empty:
                        if await request.is_disconnected():
                            break
                        now = time.monotonic()
                        if now - last_beat >= heartbeat_s:
                            last_beat = now
                            yield ": keep-alive\n\n"
                        await asyncio.sleep(0.05)
                        continue
                    payload = json.dumps(event, ensure_ascii=False)
                    yield (f"id: {event['id']}\nevent: {event['event']}\n"
                           f"data: {payload}\n\n")
            finally:
                pipeline.notifier.unsubscribe(subscription)

        return StreamingResponse(stream(), media_type="text/event-stream",
                                 headers={"cache-control": "no-cache"})

    # -- care-team administration ------------------------------------------------

    @app.get("/v1/protocols")
    def list_protocols(principal: Principal = Depends(require_provider)):
        return {"protocols": [p.to_dict() for p in store.list_protocols()]}

    @app.get("/v1/protocols/{protocol_id}")
    def get_protocol(protocol_id: str,
                     principal: Principal = Depends(require_provider)):
        return store.get_protocol(protocol_id).to_dict()

    @app.put("/v1/protocols/{protocol_id}")
    def put_protocol(protocol_id: str, body: dict,
                     principal: Principal = Depends(require_provider)):
        body = {**body, "protocol_id": protocol_id}
        try:
            protocol = ConversationProtocol.from_dict(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, f"bad protocol payload: {exc}")
        store.put_protocol(protocol)
        return protocol.to_dict()

    @app.get("/v1/patients")
    def list_patients(principal: Principal = Depends(require_provider)):
        return {"patients": [p.to_dict() for p in store.list_patients()]}

    @app.get("/v1/patients/{patient_id}")
    def get_patient(patient_id: str,
                    principal: Principal = Depends(require_provider)):
        return store.get_patient(patient_id).to_dict()

    @app.put("/v1/patients/{patient_id}")
    def put_patient(patient_id: str, body: dict,
                    principal: Principal = Depends(require_provider)):
        body = {**body, "patient_id": patient_id}
        try:
            profile = PatientProfile.from_dict(body)
        except (KeyError, TypeError) as exc:
            raise HTTPException(422, f"bad patient payload: {exc}")
        store.put_patient(profile)
        return profile.to_dict()

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/dashboard", StaticFiles(directory=ui_dir, html=True), name="dashboard")

    return app
