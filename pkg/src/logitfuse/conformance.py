"""Reusable conformance checks for fusion wire protocol v1 servers.

The same suite validates the in-process mock server and any external model
adapter: point :func:`run_provider_conformance` at an ``httpx.Client`` whose
base URL serves the protocol. Checks raise ``AssertionError`` with a
description on the first violation and return a summary dict on success.
"""

from __future__ import annotations

import base64
from typing import Sequence

import httpx
import numpy as np

from .providers import RemoteProvider, VocabDescriptor, hash_token_table


def _post(client: httpx.Client, path: str, body: dict) -> httpx.Response:
    return client.post(path, json=body)


def run_provider_conformance(
    client: httpx.Client,
    expected_table: Sequence[str] | None = None,
    prefix_trials: int = 20,
    max_prefix_len: int = 12,
    seed: int = 0,
) -> dict:
    """Exercise a wire protocol v1 server end to end.

    Covers: descriptor stability and (optionally) the cross-implementation
    table hash; session lifecycle with 404s after deletion; bit-exact
    payload framing; incremental-equals-full-prefix logits; idempotent
    re-delivery via prefix_len; the stateless full-prefix mode; and 422 on
    out-of-range token ids.
    """
    checks: list[str] = []

    def ok(name: str, cond: bool, detail: str = "") -> None:
        assert cond, f"conformance check failed: {name}{': ' + detail if detail else ''}"
        checks.append(name)

    # --- vocabulary descriptor -------------------------------------------
    r1 = _post(client, "/v1/vocab", {})
    ok("vocab status", r1.status_code == 200, f"got {r1.status_code}")
    desc = VocabDescriptor.from_wire(r1.json())
    r2 = _post(client, "/v1/vocab", {})
    ok("vocab stable", r2.json() == r1.json())
    if expected_table is not None:
        ok("vocab size matches table", desc.size == len(expected_table),
           f"{desc.size} != {len(expected_table)}")
        ok(
            "vocab cross-implementation hash",
            desc.content_hash == hash_token_table(expected_table),
            f"{desc.content_hash} != {hash_token_table(expected_table)}",
        )

    # --- session lifecycle ------------------------------------------------
    r = _post(client, "/v1/session", {})
    ok("session open", r.status_code == 200 and "session_id" in r.json())
    sid = r.json()["session_id"]
    r = client.delete(f"/v1/session/{sid}")
    ok("session delete", r.status_code == 204, f"got {r.status_code}")
    r = client.delete(f"/v1/session/{sid}")
    ok("double delete 404", r.status_code == 404, f"got {r.status_code}")
    r = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": [0]})
    ok("logits on deleted session 404", r.status_code == 404, f"got {r.status_code}")

    # --- wrong-hash session refusal ---------------------------------------
    r = _post(client, "/v1/session", {"expected_vocab_hash": "0" * 64})
    ok("vocab hash mismatch 409", r.status_code == 409, f"got {r.status_code}")

    # --- payload framing ----------------------------------------------------
    sid = _post(client, "/v1/session", {}).json()["session_id"]
    r = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": [0], "prefix_len": 1})
    ok("logits status", r.status_code == 200, f"got {r.status_code}: {r.text}")
    b64 = r.json()["logits_b64"]
    raw = base64.b64decode(b64)
    ok("payload length 4*|V|", len(raw) == 4 * desc.size, f"{len(raw)} != {4 * desc.size}")
    vec = np.frombuffer(raw, dtype="<f4")
    ok("payload finite", bool(np.all(np.isfinite(vec))))
    ok("payload b64 round-trip", base64.b64encode(raw).decode("ascii") == b64)

    # --- idempotent re-delivery --------------------------------------------
    r2 = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": [0], "prefix_len": 1})
    ok("retry dedup status", r2.status_code == 200, f"got {r2.status_code}")
    ok("retry dedup bytes", r2.json()["logits_b64"] == b64)
    r3 = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": []})
    ok("empty append idempotent", r3.json()["logits_b64"] == b64)
    client.delete(f"/v1/session/{sid}")

    # --- malformed tokens ----------------------------------------------------
    sid = _post(client, "/v1/session", {}).json()["session_id"]
    r = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": [desc.size]})
    ok("out-of-range token 422", r.status_code == 422, f"got {r.status_code}")
    r = _post(client, "/v1/logits", {"session_id": sid, "append_tokens": [-1]})
    ok("negative token 422", r.status_code == 422, f"got {r.status_code}")
    client.delete(f"/v1/session/{sid}")

    # --- incremental == full prefix, and stateless mode ---------------------
    rng = np.random.Generator(np.random.PCG64(seed))
    base_url = str(client.base_url) if client.base_url else ""
    provider_inc = RemoteProvider(base_url, client=client)
    provider_full = RemoteProvider(base_url, client=client)
    for trial in range(prefix_trials):
        n = int(rng.integers(1, max_prefix_len + 1))
        prefix = [int(t) for t in rng.integers(0, desc.size, size=n)]

        s_inc = provider_inc.open_session()
        for tok in prefix:
            vec_inc = provider_inc.next_logits(s_inc, [tok])
        s_full = provider_full.open_session()
        vec_full = provider_full.next_logits(s_full, prefix)
        assert vec_inc.tobytes() == vec_full.tobytes(), (
            f"incremental vs full prefix mismatch on trial {trial}, prefix {prefix}"
        )
        r = _post(client, "/v1/logits", {"tokens": prefix})
        assert r.status_code == 200, f"stateless mode failed: {r.status_code}"
        assert r.json()["logits_b64"] == base64.b64encode(vec_full.tobytes()).decode("ascii"), (
            f"stateless vs session mismatch on trial {trial}"
        )
        provider_inc.close_session(s_inc)
        provider_full.close_session(s_full)
    checks.append(f"incremental==full-prefix==stateless ({prefix_trials} prefixes)")

    return {"checks": checks, "descriptor": desc.to_wire()}
