"""Small shared helpers: seed derivation, canonical JSON, checksums."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed derived from the given parts.

    Every random decision in the package draws from a seed produced here,
    so results never depend on call order, worker count, or process state.
    Kept within int64 range so both numpy and torch generators accept it.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj: Any) -> str:
    """Hash of a JSON-serializable configuration object."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def cache_dir() -> Path:
    """Directory for downloaded backend weights and other reusable blobs.

    RAFFNET_CACHE overrides the default. The built-in toy backends are
    generated procedurally and never touch this, but resolvers that fetch
    pretrained weights should store them here so repeat runs stay offline.
    """
    override = os.environ.get("RAFFNET_CACHE")
    base = Path(override) if override else Path.home() / ".cache" / "raffnet"
    base.mkdir(parents=True, exist_ok=True)
    return base
