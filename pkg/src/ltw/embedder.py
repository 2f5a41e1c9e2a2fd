"""Hashed bag-of-tokens window embeddings.

A stand-in sentence encoder: each (position, token) pair hashes to one signed
bucket, so windows sharing tokens in the same slots land close together and
unrelated windows are near-orthogonal in expectation.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np

from ltw.errors import ZeroVectorError
from ltw.partition import splitmix64_mix

DEFAULT_DIM = 64
DEFAULT_WINDOW = 6

_SALT = 0x5E1EC7ED_0000_0000


@lru_cache(maxsize=None)
def feature(token: int, position: int, dim: int) -> tuple[int, float]:
    """(bucket, sign) for ``token`` at window slot ``position``."""
    raw = splitmix64_mix(_SALT ^ ((token + 1) << 16) ^ (position + 1))
    sign = 1.0 if splitmix64_mix(raw) & 1 else -1.0
    return raw % dim, sign


def embed_window(tokens: Sequence[int], vocab_size: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    vec = np.zeros(dim)
    if len(tokens) == 0:
        return vec
    for j, t in enumerate(tokens):
        t = int(t)
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of {vocab_size}")
        bucket, sign = feature(t, j, dim)
        vec[bucket] += sign
    return vec / math.sqrt(len(tokens))


def embed_bag(tokens: Sequence[int], vocab_size: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Position-free embedding of a whole text: every token uses its slot-0 feature."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        return np.zeros(dim)
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token id outside vocabulary")
    return feature_matrix(vocab_size, dim)[ids].sum(axis=0) / math.sqrt(ids.size)


@lru_cache(maxsize=16)
def _feature_matrix(vocab_size: int, dim: int) -> np.ndarray:
    phi = np.zeros((vocab_size, dim))
    for v in range(vocab_size):
        bucket, sign = feature(v, 0, dim)
        phi[v, bucket] = sign
    phi.flags.writeable = False
    return phi


def feature_matrix(vocab_size: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Row ``v`` is ``embed_window([v])``."""
    return _feature_matrix(vocab_size, dim)


def expected_embedding(step_probs: Sequence[np.ndarray] | np.ndarray, vocab_size: int,
                       dim: int = DEFAULT_DIM) -> np.ndarray:
    """Mean over steps of the probability-weighted single-token features."""
    probs = np.asarray(step_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.shape[0] == 0:
        raise ValueError("expected_embedding needs at least one step")
    if probs.shape[1] != vocab_size:
        raise ValueError(f"probability vectors have width {probs.shape[1]}, expected {vocab_size}")
    return (probs @ feature_matrix(vocab_size, dim)).mean(axis=0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
