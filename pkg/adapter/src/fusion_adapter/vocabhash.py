"""Content hash of an ordered token table, per fusion wire protocol v1.

Independent implementation of the protocol's digest: SHA-256 over
``u32-le id || u32-le utf-8 byte length || utf-8 bytes`` for every token in
id order. Engines on the other side of the wire compute the same digest to
gate vocabulary compatibility.
"""

from __future__ import annotations

import hashlib
from typing import Sequence


def token_table_hash(tokens: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for token_id, token in enumerate(tokens):
        raw = token.encode("utf-8")
        digest.update(token_id.to_bytes(4, "little"))
        digest.update(len(raw).to_bytes(4, "little"))
        digest.update(raw)
    return digest.hexdigest()
