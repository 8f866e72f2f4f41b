"""Stable seed derivation so every generative call is reproducible."""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *parts: object) -> int:
    text = ":".join([str(base), *(str(p) for p in parts)])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1
