"""Fusion wire protocol v1 server over a checkpoint backend.

Sessions cache the token prefix only (no KV state); the cache is LRU with a
configurable capacity, and an evicted session simply 404s — clients fall
back to recreating the session or to the stateless full-prefix mode.
``prefix_len`` on logits requests makes retried deliveries idempotent.
"""

from __future__ import annotations

import base64
import threading
import uuid
from collections import OrderedDict

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel

from .backend import CheckpointBackend
from .vocabhash import token_table_hash


class SessionOpenBody(BaseModel):
    expected_vocab_hash: str | None = None


class LogitsBody(BaseModel):
    session_id: str | None = None
    append_tokens: list[int] | None = None
    prefix_len: int | None = None
    tokens: list[int] | None = None


class SessionStore:
    """Thread-safe LRU of session_id -> prefix token list."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._sessions: OrderedDict[str, list[int]] = OrderedDict()

    def open(self) -> str:
        session_id = uuid.uuid4().hex
        with self._lock:
            self._sessions[session_id] = []
            while len(self._sessions) > self.capacity:
                self._sessions.popitem(last=False)
        return session_id

    def get(self, session_id: str) -> list[int] | None:
        with self._lock:
            prefix = self._sessions.get(session_id)
            if prefix is not None:
                self._sessions.move_to_end(session_id)
            return prefix

    def close(self, session_id: str) -> bool:
        with self._lock:
            return self._sessions.pop(session_id, None) is not None

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


def build_app(backend: CheckpointBackend, max_sessions: int = 256) -> FastAPI:
    app = FastAPI(title="fusion wire protocol v1 model adapter")
    store = SessionStore(max_sessions)
    vocab_hash = token_table_hash(backend.token_table)
    descriptor = {
        "size": backend.vocab_size,
        "content_hash": vocab_hash,
        "eos_id": backend.eos_id,
        "special_ids": backend.special_ids,
    }

    def validate_ids(tokens: list[int]) -> None:
        for t in tokens:
            if not (0 <= t < backend.vocab_size):
                raise HTTPException(
                    422, f"token id {t} out of range for vocab size {backend.vocab_size}"
                )

    def payload_for(prefix: list[int]) -> dict:
        try:
            vec = backend.logits_for(prefix)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        return {"logits_b64": base64.b64encode(vec.tobytes()).decode("ascii")}

    @app.post("/v1/vocab")
    def vocab() -> dict:
        return descriptor

    @app.post("/v1/session")
    def open_session(body: SessionOpenBody) -> dict:
        if body.expected_vocab_hash is not None and body.expected_vocab_hash != vocab_hash:
            raise HTTPException(
                409,
                f"vocab mismatch: server hash {vocab_hash}, client expected {body.expected_vocab_hash}",
            )
        return {"session_id": store.open()}

    @app.post("/v1/logits")
    def logits(body: LogitsBody) -> dict:
        if body.tokens is not None:
            validate_ids(body.tokens)
            return payload_for(list(body.tokens))
        if body.session_id is None:
            raise HTTPException(422, "either session_id or tokens is required")
        prefix = store.get(body.session_id)
        if prefix is None:
            raise HTTPException(404, f"unknown session {body.session_id}")
        append = list(body.append_tokens or [])
        validate_ids(append)
        if body.prefix_len is not None:
            if body.prefix_len == len(prefix) and (
                not append or prefix[-len(append):] == append
            ):
                append = []  # retried delivery; do not re-append
            elif body.prefix_len != len(prefix) + len(append):
                raise HTTPException(
                    409,
                    f"prefix desync: session has {len(prefix)} tokens, request implies {body.prefix_len}",
                )
        prefix.extend(append)
        return payload_for(prefix)

    @app.delete("/v1/session/{session_id}", status_code=204)
    def close_session(session_id: str) -> Response:
        if not store.close(session_id):
            raise HTTPException(404, f"unknown session {session_id}")
        return Response(status_code=204)

    return app
