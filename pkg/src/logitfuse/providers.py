"""Logit providers: a uniform contract for per-step next-token logits.

Three implementations matter here:

* :class:`TableLM` — a deterministic n-gram toy model driven by a context
  table, used as the test fixture standing in for a real LM.
* :class:`RemoteProvider` — an HTTP client speaking fusion wire protocol v1
  (see ``server.py`` for the matching server and the README for the format).
* Anything else implementing :class:`LogitProvider`.

Vocabulary compatibility across the target/base/guider triple is enforced
by content hash, not by size alone: fusing across different tokenizers would
silently corrupt the delta term, so mismatches are hard errors.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .errors import (
    NumericError,
    ShapeMismatchError,
    TransportError,
    UnknownSessionError,
    VocabMismatchError,
)

WIRE_PROTOCOL = "fusion-wire/v1"


def hash_token_table(tokens: Sequence[str]) -> str:
    """SHA-256 over the ordered (token id -> token string) table.

    Per-entry encoding: u32-LE id, u32-LE UTF-8 byte length, UTF-8 bytes.
    Any conforming wire-protocol server must compute the same digest.
    """
    h = hashlib.sha256()
    for i, tok in enumerate(tokens):
        raw = tok.encode("utf-8")
        h.update(i.to_bytes(4, "little"))
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    return h.hexdigest()


def encode_logits(logits) -> str:
    """Base64 of the vector as little-endian IEEE-754 float32 bytes."""
    arr = np.ascontiguousarray(np.asarray(logits, dtype="<f4"))
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_logits(payload: str, expected_size: int | None = None) -> np.ndarray:
    """Inverse of :func:`encode_logits`; bit-exact by construction."""
    try:
        raw = base64.b64decode(payload, validate=True)
    except Exception as exc:
        raise TransportError(f"invalid base64 logits payload: {exc}") from exc
    if len(raw) % 4 != 0:
        raise TransportError(f"logits payload length {len(raw)} is not a multiple of 4")
    arr = np.frombuffer(raw, dtype="<f4").copy()
    if expected_size is not None and arr.size != expected_size:
        raise TransportError(f"expected {expected_size} logits, got {arr.size}")
    return arr


@dataclass(frozen=True)
class VocabDescriptor:
    """Stable identity of a provider's tokenizer."""

    size: int
    content_hash: str
    eos_id: int
    special_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError(f"vocab size must be positive, got {self.size}")
        if not (0 <= self.eos_id < self.size):
            raise ValueError(f"eos_id {self.eos_id} out of range for size {self.size}")
        ids = tuple(sorted(set(int(i) for i in self.special_ids)))
        if ids and not (0 <= ids[0] and ids[-1] < self.size):
            raise ValueError(f"special_ids {ids} out of range for size {self.size}")
        object.__setattr__(self, "special_ids", ids)

    def to_wire(self) -> dict:
        return {
            "size": self.size,
            "content_hash": self.content_hash,
            "eos_id": self.eos_id,
            "special_ids": list(self.special_ids),
        }

    @classmethod
    def from_wire(cls, payload: Mapping) -> "VocabDescriptor":
        try:
            return cls(
                size=int(payload["size"]),
                content_hash=str(payload["content_hash"]),
                eos_id=int(payload["eos_id"]),
                special_ids=tuple(int(i) for i in payload.get("special_ids", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed vocab descriptor: {exc}") from exc


def check_compatibility(
    a: VocabDescriptor, b: VocabDescriptor, c: VocabDescriptor
) -> str | None:
    """Return None when all three descriptors agree, else a report string.

    The report names the first differing field (size, then content_hash,
    then eos_id) and which operand diverges from the first.
    """
    for field_name in ("size", "content_hash", "eos_id"):
        va, vb, vc = (getattr(d, field_name) for d in (a, b, c))
        if va == vb == vc:
            continue
        position = "second" if vb != va else "third"
        return f"{field_name} mismatch ({position} differs): {va!r} vs {vb!r} vs {vc!r}"
    return None


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token table with eos and special ids; supports display decode."""

    tokens: tuple[str, ...]
    eos_id: int
    special_ids: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "special_ids", frozenset(int(i) for i in self.special_ids))
        if not self.tokens:
            raise ValueError("vocabulary must contain at least one token")
        if not (0 <= self.eos_id < len(self.tokens)):
            raise ValueError(f"eos_id {self.eos_id} out of range")
        for i in self.special_ids:
            if not (0 <= i < len(self.tokens)):
                raise ValueError(f"special id {i} out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def descriptor(self) -> VocabDescriptor:
        return VocabDescriptor(
            size=self.size,
            content_hash=hash_token_table(self.tokens),
            eos_id=self.eos_id,
            special_ids=tuple(sorted(self.special_ids)),
        )

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        """Join token strings with single spaces, for display and grading."""
        parts = []
        for i in ids:
            if not (0 <= i < self.size):
                raise ValueError(f"token id {i} out of range")
            if skip_special and (i in self.special_ids or i == self.eos_id):
                continue
            parts.append(self.tokens[i])
        return " ".join(parts)

    def token_id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "eos_id": self.eos_id,
            "special_ids": sorted(self.special_ids),
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> "Vocabulary":
        return cls(
            tokens=tuple(payload["tokens"]),
            eos_id=int(payload["eos_id"]),
            special_ids=frozenset(payload.get("special_ids", ())),
        )


class ProviderSession:
    """Append-only token prefix bound to one provider session."""

    __slots__ = ("session_id", "prefix")

    def __init__(self, session_id: str, prefix: Sequence[int] = ()) -> None:
        self.session_id = session_id
        self.prefix: list[int] = list(prefix)

    def extend(self, new_tokens: Sequence[int]) -> None:
        self.prefix.extend(int(t) for t in new_tokens)


@runtime_checkable
class LogitProvider(Protocol):
    """Contract for obtaining next-token logits given a growing prefix."""

    prefers_concurrent_io: bool

    def describe_vocab(self) -> VocabDescriptor: ...

    def open_session(self) -> ProviderSession: ...

    def next_logits(self, session: ProviderSession, new_tokens: Sequence[int]) -> np.ndarray: ...

    def close_session(self, session: ProviderSession) -> None: ...


def _context_key(tokens: Sequence[int]) -> str:
    return ",".join(str(int(t)) for t in tokens)


def _parse_context_key(key: str) -> tuple[int, ...]:
    if key == "":
        return ()
    return tuple(int(part) for part in key.split(","))


class TableLM:
    """Deterministic table-driven toy LM.

    The next-step logits are the table entry keyed by the last
    ``min(order, t)`` prefix tokens; contexts missing from the table fall
    back to a declared default vector (uniform zeros unless given), keeping
    every scenario a total function.
    """

    prefers_concurrent_io = False

    def __init__(
        self,
        vocab: Vocabulary,
        order: int = 1,
        table: Mapping[tuple[int, ...], Sequence[float]] | None = None,
        default: Sequence[float] | None = None,
    ) -> None:
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        self.vocab = vocab
        self.order = order
        self._descriptor = vocab.descriptor()
        if default is None:
            self.default = np.zeros(vocab.size, dtype=np.float32)
        else:
            self.default = self._validate_row(default, "default")
        self.table: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, row in (table or {}).items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) > order:
                raise ValueError(f"context {ctx} longer than order {order}")
            for t in ctx:
                if not (0 <= t < vocab.size):
                    raise ValueError(f"context token {t} out of range")
            self.table[ctx] = self._validate_row(row, f"table[{ctx}]")

    def _validate_row(self, row, label: str) -> np.ndarray:
        arr = np.asarray(row, dtype=np.float32)
        if arr.shape != (self.vocab.size,):
            raise ShapeMismatchError(
                f"{label} has length {arr.size}, vocabulary has {self.vocab.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{label} contains NaN or Inf")
        return arr

    def describe_vocab(self) -> VocabDescriptor:
        return self._descriptor

    def open_session(self) -> ProviderSession:
        return ProviderSession(uuid.uuid4().hex)

    def next_logits(self, session: ProviderSession, new_tokens: Sequence[int]) -> np.ndarray:
        for t in new_tokens:
            if not (0 <= int(t) < self.vocab.size):
                raise ValueError(f"token id {t} out of range for vocab size {self.vocab.size}")
        session.extend(new_tokens)
        t = len(session.prefix)
        ctx = tuple(session.prefix[t - min(self.order, t):]) if t else ()
        row = self.table.get(ctx, self.default)
        return row.copy()

    def close_session(self, session: ProviderSession) -> None:  # nothing to release
        pass

    def to_json(self) -> dict:
        return {
            "vocab": self.vocab.to_json(),
            "order": self.order,
            "default": [float(x) for x in self.default],
            "table": {_context_key(ctx): [float(x) for x in row] for ctx, row in self.table.items()},
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> "TableLM":
        return cls(
            vocab=Vocabulary.from_json(payload["vocab"]),
            order=int(payload.get("order", 1)),
            table={_parse_context_key(k): v for k, v in payload.get("table", {}).items()},
            default=payload.get("default"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TableLM":
        return cls.from_json(json.loads(Path(path).read_text()))


class RemoteProvider:
    """Client side of fusion wire protocol v1.

    Stateful by default: the server caches the session prefix so each step
    only ships the newly appended tokens. Every logits request carries
    ``prefix_len`` (the intended prefix length after the append), which lets
    the server deduplicate retried deliveries — transport retries are
    therefore safe and limited to ``max_retries`` with a fixed backoff.
    A stateless mode resends the full prefix on every call.
    """

    prefers_concurrent_io = True

    def __init__(
        self,
        base_url: str,
        client: httpx.Client | None = None,
        stateless: bool = False,
        max_retries: int = 3,
        retry_backoff: float = 0.05,
        timeout: float = 30.0,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.stateless = stateless
        self.max_retries = max_retries
        self.retry_backoff = retry_backoff
        self._client = client or httpx.Client(base_url=self.base_url, timeout=timeout)
        self._descriptor: VocabDescriptor | None = None

    def _request(self, method: str, path: str, json_body: dict | None = None) -> httpx.Response:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                return self._client.request(method, path, json=json_body)
            except httpx.HTTPError as exc:
                last = exc
                if attempt < self.max_retries:
                    time.sleep(self.retry_backoff)
        raise TransportError(f"{method} {self.base_url}{path} failed: {last}") from last

    @staticmethod
    def _check(resp: httpx.Response, context: str) -> dict:
        if resp.status_code == 404:
            raise UnknownSessionError(f"{context}: unknown session")
        if resp.status_code == 409:
            raise VocabMismatchError(f"{context}: {resp.text}")
        if resp.status_code == 422:
            raise ValueError(f"{context}: malformed tokens: {resp.text}")
        if resp.status_code >= 400:
            raise TransportError(f"{context}: HTTP {resp.status_code}: {resp.text}")
        if resp.status_code == 204:
            return {}
        try:
            return resp.json()
        except Exception as exc:
            raise TransportError(f"{context}: invalid JSON body") from exc

    def describe_vocab(self) -> VocabDescriptor:
        if self._descriptor is None:
            payload = self._check(self._request("POST", "/v1/vocab", {}), "describe_vocab")
            self._descriptor = VocabDescriptor.from_wire(payload)
        return self._descriptor

    def open_session(self) -> ProviderSession:
        if self.stateless:
            return ProviderSession("stateless-" + uuid.uuid4().hex)
        payload = self._check(self._request("POST", "/v1/session", {}), "open_session")
        try:
            return ProviderSession(str(payload["session_id"]))
        except KeyError as exc:
            raise TransportError("open_session: missing session_id in response") from exc

    def _fetch(self, body: dict) -> np.ndarray:
        payload = self._check(self._request("POST", "/v1/logits", body), "next_logits")
        try:
            b64 = payload["logits_b64"]
        except KeyError as exc:
            raise TransportError("next_logits: missing logits_b64 in response") from exc
        return decode_logits(b64, expected_size=self.describe_vocab().size)

    def next_logits(self, session: ProviderSession, new_tokens: Sequence[int]) -> np.ndarray:
        session.extend(new_tokens)
        if self.stateless:
            return self._fetch({"tokens": list(session.prefix)})
        body = {
            "session_id": session.session_id,
            "append_tokens": [int(t) for t in new_tokens],
            "prefix_len": len(session.prefix),
        }
        try:
            return self._fetch(body)
        except UnknownSessionError:
            # Session evicted server-side: recreate it and replay the full
            # prefix once. The local mirror already holds the whole prefix.
            fresh = self.open_session()
            session.session_id = fresh.session_id
            return self._fetch(
                {
                    "session_id": session.session_id,
                    "append_tokens": list(session.prefix),
                    "prefix_len": len(session.prefix),
                }
            )

    def close_session(self, session: ProviderSession) -> None:
        if self.stateless:
            return
        try:
            resp = self._request("DELETE", f"/v1/session/{session.session_id}")
        except TransportError:
            return  # best effort; server-side GC will reclaim
        if resp.status_code not in (204, 404):
            raise TransportError(f"close_session: HTTP {resp.status_code}")

    def close(self) -> None:
        self._client.close()
