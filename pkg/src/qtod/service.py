"""HTTP surface over the dialogue engine.

Sessions are created with their knowledge base, then driven turn by
turn; retrieval and the two metrics are also exposed standalone. Run it
with `uvicorn qtod.service:app`. The module-level app binds the rule
backend, so it is fully deterministic and needs no model; embed
create_app(backend=...) to serve a different one.

All errors use the wire shape {"error": str} with a 4xx/5xx status.
"""

from __future__ import annotations

import itertools
import threading
from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import evaluation
from .backends import RuleBackend
from .errors import BackendError, QtodError, TransportError, ValidationError
from .kb import KnowledgeBase, kb_from_smd_items, record_from_obj
from .pipeline import Session, run_turn

MODE_ALIASES = {
    "qtod": "qtod",
    "identity": "identity_query",
    "identity_query": "identity_query",
    "oracle": "oracle_knowledge",
    "oracle_knowledge": "oracle_knowledge",
}


class KbPayload(BaseModel):
    scope: str = "session"
    records: list[dict] = Field(default_factory=list)


class CreateSessionRequest(BaseModel):
    session_id: str | None = None
    kb: KbPayload | list[dict] = Field(default_factory=lambda: KbPayload())
    mode: str = "qtod"
    top_n: int = 3


class TurnRequest(BaseModel):
    utterance: str
    mode: str | None = None
    n: int | None = None
    gold_record_ids: list[str] | None = None
    history_response: str | None = None


class RetrieveRequest(BaseModel):
    kb: KbPayload | list[dict]
    query: str
    n: int = 3


class EntityF1Request(BaseModel):
    preds: list[str]
    golds: list[str]
    lexicon: list[str]


class BleuRequest(BaseModel):
    preds: list[str]
    refs: list[str]


def _kb_from_payload(payload: KbPayload | list[dict]) -> KnowledgeBase:
    if isinstance(payload, list):
        return kb_from_smd_items(payload, "d0")
    records = tuple(
        record_from_obj(obj, i) for i, obj in enumerate(payload.records)
    )
    return KnowledgeBase(records, scope="session")


def _mode(name: str | None) -> str | None:
    if name is None:
        return None
    try:
        return MODE_ALIASES[name]
    except KeyError:
        raise ValidationError(f"unknown mode {name!r}") from None


def create_app(backend=None) -> FastAPI:
    backend = backend or RuleBackend()
    app = FastAPI(title="qtod", docs_url=None, redoc_url=None)
    sessions: dict[str, Session] = {}
    lock = threading.Lock()
    counter = itertools.count()

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return JSONResponse({"error": f"invalid request: {exc.errors()[:3]}"}, status_code=400)

    @app.exception_handler(ValidationError)
    async def _validation(request: Request, exc: ValidationError):
        return JSONResponse({"error": str(exc)}, status_code=400)

    @app.exception_handler(TransportError)
    async def _transport(request: Request, exc: TransportError):
        return JSONResponse({"error": str(exc)}, status_code=502)

    @app.exception_handler(BackendError)
    async def _backend(request: Request, exc: BackendError):
        return JSONResponse({"error": str(exc)}, status_code=502)

    @app.exception_handler(QtodError)
    async def _internal(request: Request, exc: QtodError):
        return JSONResponse({"error": str(exc)}, status_code=500)

    class _NotFound(Exception):
        def __init__(self, session_id: str):
            self.session_id = session_id

    @app.exception_handler(_NotFound)
    async def _not_found(request: Request, exc: _NotFound):
        return JSONResponse(
            {"error": f"unknown session {exc.session_id!r}"}, status_code=404
        )

    def _get_session(session_id: str) -> Session:
        with lock:
            session = sessions.get(session_id)
        if session is None:
            raise _NotFound(session_id)
        return session

    @app.get("/healthz")
    def healthz() -> dict:
        return {"ok": True, "backend": getattr(backend, "backend_id", "unknown")}

    @app.post("/sessions")
    def create_session(request: CreateSessionRequest) -> dict:
        kb = _kb_from_payload(request.kb)
        session_id = request.session_id or f"s{next(counter)}"
        session = Session(
            kb,
            backend,
            session_id=session_id,
            mode=_mode(request.mode) or "qtod",
            n=request.top_n,
        )
        with lock:
            if session_id in sessions:
                raise ValidationError(f"session {session_id!r} already exists")
            sessions[session_id] = session
        return {"session_id": session_id, "records": len(kb)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        session = _get_session(session_id)
        return {
            "session_id": session.session_id,
            "mode": session.mode,
            "n": session.n,
            "turns": [{"speaker": t.speaker, "text": t.text} for t in session.turns],
        }

    @app.post("/sessions/{session_id}/turns")
    def post_turn(session_id: str, request: TurnRequest) -> dict:
        session = _get_session(session_id)
        result = run_turn(
            session,
            request.utterance,
            mode=_mode(request.mode),
            n=request.n,
            gold_record_ids=request.gold_record_ids,
            history_response=request.history_response,
        )
        return result.to_dict()

    @app.post("/sessions/{session_id}/reset")
    def reset_session(session_id: str) -> dict:
        _get_session(session_id).reset()
        return {"ok": True}

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str) -> dict:
        _get_session(session_id)
        with lock:
            sessions.pop(session_id, None)
        return {"ok": True}

    @app.post("/retrieve")
    def retrieve_standalone(request: RetrieveRequest) -> dict:
        from .retriever import build_index, retrieve

        kb = _kb_from_payload(request.kb)
        result = retrieve(build_index(kb, "bm25"), request.query, request.n)
        return {
            "entries": [
                {"record_id": rid, "score": score} for rid, score in result.entries
            ],
            "query_echo": result.query_echo,
        }

    @app.post("/eval/entity_f1")
    def eval_entity_f1(request: EntityF1Request) -> dict:
        scores = evaluation.entity_f1(request.preds, request.golds, request.lexicon)
        return {
            "entity_f1": scores.f1,
            "precision": scores.precision,
            "recall": scores.recall,
            "tp": scores.tp,
            "fp": scores.fp,
            "fn": scores.fn,
        }

    @app.post("/eval/bleu")
    def eval_bleu(request: BleuRequest) -> dict:
        return {"bleu": evaluation.bleu(request.preds, request.refs)}

    return app


app = create_app()
