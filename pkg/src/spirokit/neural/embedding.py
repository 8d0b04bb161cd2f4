"""Deterministic hashed bag-of-words text embedding.

Used to build alignment targets for projector pretraining: tokens are
hashed (md5, so the mapping is stable across processes) into sign-hashed
buckets and the result is L2-normalized.  Empty text maps to the zero
vector.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.md5(token.encode("utf-8")).digest()[:8], "big")


def text_embed(text: str, dim: int = 256) -> np.ndarray:
    if dim < 8:
        raise ValueError("dim must be >= 8")
    vec = np.zeros(dim)
    for token in _TOKEN_RE.findall(text.lower()):
        h = _token_hash(token)
        bucket = h % dim
        sign = 1.0 if (h >> 32) & 1 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec
