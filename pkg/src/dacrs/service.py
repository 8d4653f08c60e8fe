"""HTTP serving layer: per-session conversational recommendation over a
trained checkpoint. Returns structured recommendations only; reply text
generation is out of scope.
"""
from __future__ import annotations

import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .augment import serialize_dialogue
from .corpus import Utterance
from .encoder import EncoderError, HashedNgramEncoder
from .errors import ConfigError, NumericError
from .kg import Kg, build_index, link_entities, load_kg_dir
from .model import recommend, rgcn_forward, user_embedding
from .trainer import Checkpoint, file_sha256, load_checkpoint

logger = logging.getLogger(__name__)

IDLE_EVICTION_SECONDS = 30 * 60


@dataclass
class Session:
    session_id: str
    utterances: list[Utterance] = field(default_factory=list)
    entity_ids: list[int] = field(default_factory=list)
    recommended_items: list[int] = field(default_factory=list)
    created: float = 0.0
    last_active: float = 0.0


@dataclass
class ServiceState:
    kg: Kg
    checkpoint: Checkpoint
    encoder: object
    embeddings: np.ndarray
    checkpoint_hash: str
    idle_seconds: float = IDLE_EVICTION_SECONDS
    clock: Callable[[], float] = time.time
    sessions: dict[str, Session] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def evict_idle(self) -> None:
        now = self.clock()
        stale = [
            sid
            for sid, session in self.sessions.items()
            if now - session.last_active > self.idle_seconds
        ]
        for sid in stale:
            del self.sessions[sid]


class RecommendRequest(BaseModel):
    session_id: str
    utterance: str
    k: int = Field(default=10, ge=1)


def _error(status: int, message: str, retriable: bool) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message, "retriable": retriable})


def build_state(
    checkpoint: Checkpoint,
    kg: Kg,
    encoder=None,
    checkpoint_hash: str = "",
    idle_seconds: float = IDLE_EVICTION_SECONDS,
    clock: Callable[[], float] = time.time,
) -> ServiceState:
    """Load-once wiring: entity embeddings are computed here and never mutated."""
    if checkpoint.params.base_table.shape[0] != kg.num_entities:
        raise ConfigError("checkpoint entity count does not match the kg")
    if encoder is None:
        encoder = HashedNgramEncoder(checkpoint.model_config.d_llm)
    index = build_index(kg)
    embeddings = rgcn_forward(checkpoint.params, index, checkpoint.model_config)
    embeddings.setflags(write=False)
    return ServiceState(
        kg=kg,
        checkpoint=checkpoint,
        encoder=encoder,
        embeddings=embeddings,
        checkpoint_hash=checkpoint_hash,
        idle_seconds=idle_seconds,
        clock=clock,
    )


def handle_recommend(
    state: ServiceState, session: Session, utterance_text: str, k: int
) -> dict:
    """Append the user turn, link entities, run the forward path, record the
    recommender turn. Mentioned items and previously recommended items are
    excluded from the ranking."""
    mentions = link_entities(state.kg, utterance_text, len(session.utterances))
    linked_ids: list[int] = []
    for mention in mentions:
        if mention.entity_id not in linked_ids:
            linked_ids.append(mention.entity_id)
    session.utterances.append(
        Utterance(speaker="user", text=utterance_text, entities=tuple(linked_ids))
    )
    for entity_id in linked_ids:
        if entity_id not in session.entity_ids:
            session.entity_ids.append(entity_id)

    text = serialize_dialogue(session.utterances)
    vector = np.asarray(state.encoder.encode(text), dtype=np.float64)
    config = state.checkpoint.model_config
    u = user_embedding(
        vector, session.entity_ids, state.embeddings, state.checkpoint.params, config
    )

    exclusions = set(session.recommended_items)
    exclusions.update(e for e in session.entity_ids if state.kg.is_item[e])
    ranking = recommend(u, state.kg, state.embeddings, k, exclusions)

    names = state.kg.entity_names
    item_ids = ranking.item_ids()
    session.recommended_items.extend(
        i for i in item_ids if i not in session.recommended_items
    )
    session.utterances.append(
        Utterance(
            speaker="recommender",
            text="Recommended: " + ", ".join(names[i] for i in item_ids),
            entities=tuple(item_ids),
        )
    )
    return {
        "recommendations": [
            {
                "item_id": item_id,
                "name": names[item_id],
                "score": score,
                "rank": rank,
            }
            for rank, (item_id, score) in enumerate(ranking.entries, start=1)
        ],
        "linked_entities": [
            {
                "entity_id": entity_id,
                "name": names[entity_id],
                "is_item": bool(state.kg.is_item[entity_id]),
            }
            for entity_id in linked_ids
        ],
    }


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="dacrs", docs_url=None, redoc_url=None)
    app.state.dacrs = state

    allow_origin = os.environ.get("DACRS_ALLOW_ORIGIN", "")
    if allow_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=[allow_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return _error(422, f"invalid request: {exc.errors()}", retriable=False)

    @app.exception_handler(Exception)
    async def _unhandled_error(request: Request, exc: Exception):
        logger.exception("unhandled error")
        return _error(500, str(exc), retriable=False)

    @app.post("/api/session", status_code=201)
    def create_session():
        with state.lock:
            state.evict_idle()
            session_id = secrets.token_hex(16)
            now = state.clock()
            state.sessions[session_id] = Session(
                session_id=session_id, created=now, last_active=now
            )
        return {"session_id": session_id}

    @app.post("/api/recommend")
    def recommend_endpoint(request: RecommendRequest):
        with state.lock:
            state.evict_idle()
            session = state.sessions.get(request.session_id)
            if session is None:
                return _error(404, "unknown session_id", retriable=False)
            session.last_active = state.clock()
            try:
                return handle_recommend(state, session, request.utterance, request.k)
            except EncoderError as exc:
                return _error(502, f"embedding provider failed: {exc}", retriable=True)
            except (NumericError, ArithmeticError) as exc:
                return _error(500, f"model failure: {exc}", retriable=False)

    @app.get("/api/entities")
    def search_entities(q: str = "", limit: int = 10):
        if limit < 1:
            return _error(422, "limit must be >= 1", retriable=False)
        prefix = q.lower()
        kg = state.kg
        matches = [
            entity_id
            for entity_id, name in enumerate(kg.entity_names)
            if name.lower().startswith(prefix)
        ]
        matches.sort(key=lambda e: (kg.entity_names[e].lower(), e))
        return {
            "matches": [
                {
                    "entity_id": entity_id,
                    "name": kg.entity_names[entity_id],
                    "is_item": bool(kg.is_item[entity_id]),
                }
                for entity_id in matches[:limit]
            ]
        }

    @app.get("/api/health")
    def health():
        return {
            "status": "ok",
            "checkpoint_hash": state.checkpoint_hash,
            "num_entities": state.kg.num_entities,
        }

    return app


def serve(
    checkpoint_path: str,
    kg_dir: str,
    bind_address: str = "127.0.0.1:8080",
    encoder=None,
    idle_seconds: float = IDLE_EVICTION_SECONDS,
) -> None:
    """Load artifacts once and run the HTTP server until interrupted."""
    import uvicorn

    checkpoint = load_checkpoint(checkpoint_path)
    kg = load_kg_dir(kg_dir)
    state = build_state(
        checkpoint,
        kg,
        encoder=encoder,
        checkpoint_hash=file_sha256(checkpoint_path),
        idle_seconds=idle_seconds,
    )
    app = create_app(state)
    host, _, port = bind_address.rpartition(":")
    if not host:
        raise ConfigError(f"bind address must be host:port, got {bind_address!r}")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
