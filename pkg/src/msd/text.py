"""Deterministic text encoder standing in for a CLIP-style text tower.

Every lowercase whitespace token maps to a fixed Gaussian vector seeded from a
SHA-256 of the token; a prompt embeds as the L2-normalised sum of its token
vectors. Prompts that share words therefore have higher cosine similarity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, EmptyText

DEFAULT_DIM = 64
COSINE_DELTA = 1e-6


@dataclass(frozen=True)
class TextEmbedding:
    values: np.ndarray
    source_text: str

    def __len__(self):
        return self.values.shape[0]


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int, salt: str) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(f"{salt}:{token}".encode()).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    vec /= np.linalg.norm(vec)
    vec.setflags(write=False)
    return vec


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class TextEncoder:
    """Callable ``text -> TextEmbedding``; swap in a learned encoder behind the same call."""

    def __init__(self, dim: int = DEFAULT_DIM, salt: str = "msd-text-v1"):
        self.dim = dim
        self.salt = salt

    def __call__(self, text: str) -> TextEmbedding:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyText("cannot embed empty text")
        total = np.zeros(self.dim)
        for tok in tokens:
            total += _token_vector(tok, self.dim, self.salt)
        norm = np.linalg.norm(total)
        if norm == 0.0:
            raise EmptyText(f"embedding of {text!r} vanished")
        return TextEmbedding(total / norm, text)

    def batch(self, texts) -> np.ndarray:
        return np.stack([self(t).values for t in texts])


_default = TextEncoder()


def embed(text: str) -> TextEmbedding:
    return _default(text)


def cosine_similarity(a, b, delta: float = COSINE_DELTA) -> float:
    """``a.b / max(|a||b|, delta)``."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), delta))
