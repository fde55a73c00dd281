"""Canonical serialization, content hashing and seeded random streams."""

from __future__ import annotations

import hashlib
import json
import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

TOMLDecodeError = tomllib.TOMLDecodeError


def load_toml(text: str) -> dict:
    return tomllib.loads(text)


def canonical_json(obj: Any, *, pretty: bool = True) -> str:
    """Sorted keys, LF line endings, trailing newline.

    Two equal objects always serialize to identical bytes.
    """
    if pretty:
        text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)
    else:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return text + "\n"


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj, pretty=False))


def stable_hash64(*parts: Any) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


class SeededStreams:
    """Counter-based random streams derived from one scenario seed.

    Each named stream (typically one per node) is forked by hashing its
    key together with the seed, so draws on one stream never perturb
    another and adding a node leaves every other node's sequence intact.
    State is just the per-stream counters, which keeps it JSON-persistable.
    """

    def __init__(self, seed: int, counters: dict[str, int] | None = None):
        self.seed = int(seed)
        self.counters: dict[str, int] = dict(counters or {})

    def uniform(self, stream: str) -> float:
        n = self.counters.get(stream, 0)
        self.counters[stream] = n + 1
        return stable_hash64(self.seed, stream, n) / 2**64

    def bernoulli(self, stream: str, p: float) -> bool:
        if p <= 0.0:
            return False
        if p >= 1.0:
            return True
        return self.uniform(stream) < p

    def randint(self, stream: str, lo: int, hi: int) -> int:
        """Inclusive on both ends."""
        return lo + int(self.uniform(stream) * (hi - lo + 1))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "counters": dict(sorted(self.counters.items()))}

    @classmethod
    def from_dict(cls, data: dict) -> SeededStreams:
        return cls(data["seed"], data.get("counters"))
