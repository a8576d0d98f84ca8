"""HTTP servers: the provider wire protocol and the fused-generation service.

``build_provider_app`` wraps any in-process :class:`LogitProvider` behind
fusion wire protocol v1, which is what remote model adapters implement too.
``build_fusion_app`` exposes ``POST /v1/generate`` streaming token events as
JSON lines over a chunked response.
"""

from __future__ import annotations

import queue
import threading

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response, StreamingResponse
from pydantic import BaseModel, Field

from .engine import DecodeEngine, DecodeRequest, StepRecord
from .errors import LogitFuseError
from .fusion import GuidanceConfig
from .providers import LogitProvider, ProviderSession, encode_logits
from .sampling import SamplingConfig


class SessionOpenBody(BaseModel):
    expected_vocab_hash: str | None = None


class LogitsBody(BaseModel):
    session_id: str | None = None
    append_tokens: list[int] | None = None
    prefix_len: int | None = None
    tokens: list[int] | None = None  # stateless full-prefix mode


def build_provider_app(provider: LogitProvider) -> FastAPI:
    app = FastAPI(title="fusion wire protocol v1")
    descriptor = provider.describe_vocab()
    sessions: dict[str, ProviderSession] = {}
    lock = threading.Lock()

    def validate_ids(tokens: list[int]) -> None:
        for t in tokens:
            if not (0 <= t < descriptor.size):
                raise HTTPException(422, f"token id {t} out of range for vocab size {descriptor.size}")

    @app.post("/v1/vocab")
    def vocab() -> dict:
        return descriptor.to_wire()

    @app.post("/v1/session")
    def open_session(body: SessionOpenBody) -> dict:
        if body.expected_vocab_hash is not None and body.expected_vocab_hash != descriptor.content_hash:
            raise HTTPException(
                409,
                f"vocab mismatch: server hash {descriptor.content_hash}, client expected {body.expected_vocab_hash}",
            )
        session = provider.open_session()
        with lock:
            sessions[session.session_id] = session
        return {"session_id": session.session_id}

    @app.post("/v1/logits")
    def logits(body: LogitsBody) -> dict:
        if body.tokens is not None:
            validate_ids(body.tokens)
            scratch = provider.open_session()
            try:
                vec = provider.next_logits(scratch, body.tokens)
            finally:
                provider.close_session(scratch)
            return {"logits_b64": encode_logits(vec)}

        if body.session_id is None:
            raise HTTPException(422, "either session_id or tokens is required")
        with lock:
            session = sessions.get(body.session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {body.session_id}")
        append = list(body.append_tokens or [])
        validate_ids(append)
        if body.prefix_len is not None:
            have = len(session.prefix)
            if body.prefix_len == have and (
                not append or session.prefix[-len(append):] == append
            ):
                append = []  # duplicate delivery of a retried request
            elif body.prefix_len != have + len(append):
                raise HTTPException(
                    409,
                    f"prefix desync: session has {have} tokens, request implies {body.prefix_len}",
                )
        vec = provider.next_logits(session, append)
        return {"logits_b64": encode_logits(vec)}

    @app.delete("/v1/session/{session_id}", status_code=204)
    def close_session(session_id: str) -> Response:
        with lock:
            session = sessions.pop(session_id, None)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id}")
        provider.close_session(session)
        return Response(status_code=204)

    return app


class GuidanceBody(BaseModel):
    alpha: float = 1.0
    warmup_tokens: int = 100


class SamplingBody(BaseModel):
    temperature: float = 0.6
    top_p: float = 0.95
    seed: int = 0
    greedy: bool = False


class GenerateBody(BaseModel):
    prompt_tokens: list[int]
    guidance: GuidanceBody = Field(default_factory=GuidanceBody)
    sampling: SamplingBody = Field(default_factory=SamplingBody)
    max_new_tokens: int = 8192
    mode: str = "guided"
    forcing_tokens: list[int] = Field(default_factory=list)
    forcing_budget: int | None = None


_STREAM_DONE = object()


def build_fusion_app(engine: DecodeEngine, max_concurrency: int = 4) -> FastAPI:
    """Fused-generation service over a shared, immutable engine.

    Each request owns its decode loop and provider sessions; a semaphore
    caps concurrent decodes (saturation -> 503). An incompatible provider
    triple turns every generate call into a 409.
    """
    app = FastAPI(title="logit fusion service")
    slots = threading.Semaphore(max_concurrency)

    @app.post("/v1/generate")
    def generate(body: GenerateBody) -> StreamingResponse:
        if engine.compatibility_error is not None and body.mode == "guided":
            raise HTTPException(409, f"vocab incompatibility: {engine.compatibility_error}")
        try:
            request = DecodeRequest(
                prompt_tokens=tuple(body.prompt_tokens),
                guidance=GuidanceConfig(**body.guidance.model_dump()),
                sampling=SamplingConfig(**body.sampling.model_dump()),
                max_new_tokens=body.max_new_tokens,
                mode=body.mode,
                forcing_tokens=tuple(body.forcing_tokens),
                forcing_budget=body.forcing_budget,
            )
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        if not slots.acquire(blocking=False):
            raise HTTPException(503, "decode slots saturated")

        events: queue.Queue = queue.Queue()

        def on_token(rec: StepRecord) -> None:
            events.put({"type": "token", "i": rec.index, "token": rec.token, "fused": rec.fused, "forced": rec.forced})

        def worker() -> None:
            try:
                trace = engine.decode(request, on_token=on_token)
                events.put(
                    {
                        "type": "done",
                        "stop_reason": trace.stop_reason,
                        "generated_count": trace.generated_count,
                        "tokens": trace.tokens,
                        "error": trace.error,
                        "diagnostics": trace.diagnostics,
                        "rng": trace.rng.to_json(),
                    }
                )
            except (LogitFuseError, ValueError) as exc:
                events.put({"type": "error", "message": str(exc)})
            finally:
                events.put(_STREAM_DONE)

        threading.Thread(target=worker, daemon=True).start()

        def stream():
            import json as _json

            try:
                while True:
                    item = events.get()
                    if item is _STREAM_DONE:
                        break
                    yield _json.dumps(item, sort_keys=True) + "\n"
            finally:
                slots.release()

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    return app
