"""Canonical serialization and hashing.

All content digests in the engine (bank digests, config digests, audit chain
hashes, gateway request digests) hash the same canonical form: JSON with
sorted keys, no whitespace, UTF-8 encoded.  NaN/Inf are rejected so a digest
never depends on platform float-printing quirks for non-finite values.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

GENESIS_HASH = "0" * 64


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    """SHA-256 of the canonical serialization of a JSON-compatible object."""
    return sha256_hex(canonical_bytes(obj))


def chain_hash(prev_hash: str, fields: dict) -> str:
    """Hash one audit entry: H(prev_hash || canonical(fields))."""
    return sha256_hex(prev_hash.encode("ascii") + canonical_bytes(fields))


def stable_uint64(*parts: object) -> int:
    """Derive a 64-bit seed from arbitrary parts, stable across runs."""
    material = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
