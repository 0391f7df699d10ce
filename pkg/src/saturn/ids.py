"""Deterministic identifier helpers.

Records get ids derived from their identifying content so that replaying the
same operations yields the same ids (trigger de-duplication and reproducible
test fixtures both rely on this).
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def digest_of(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def stable_hash(*parts: Any) -> str:
    """Hex digest of a JSON-canonicalized tuple of parts."""
    payload = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def make_id(prefix: str, *parts: Any, length: int = 12) -> str:
    return f"{prefix}_{stable_hash(*parts)[:length]}"
