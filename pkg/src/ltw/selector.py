"""Selector network: window embedding, entropy and watermarked ratio in, a soft
watermark decision in (0, 1) out.

Layout::

    reduce:  x (dim) -> h1 -> h2          LeakyReLU after each layer
    head:    [reduced; e; r] -> h3 -> 1   LeakyReLU, then sigmoid

Forward and backward are written for a batch of rows; the single-row
``forward``/``backward`` wrappers exist for the per-token inference path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ltw.errors import ConfigError, FormatError, StaleCacheError

LEAKY_SLOPE = 0.01
WEIGHTS_HEADER = "LTW-SELECTOR v1"
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


@dataclass
class SelectorParams:
    w1: np.ndarray  # (h1, dim)
    b1: np.ndarray
    w2: np.ndarray  # (h2, h1)
    b2: np.ndarray
    w3: np.ndarray  # (h3, h2 + 2)
    b3: np.ndarray
    w4: np.ndarray  # (1, h3)
    b4: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.w1.shape[1], self.w1.shape[0], self.w2.shape[0], self.w3.shape[0])

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def shapes(cls, dim: int, h1: int, h2: int, h3: int) -> list[tuple[int, ...]]:
        return [(h1, dim), (h1,), (h2, h1), (h2,), (h3, h2 + 2), (h3,), (1, h3), (1,)]

    @classmethod
    def from_flat(cls, vec: np.ndarray, dims: tuple[int, int, int, int]) -> "SelectorParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for shape in cls.shapes(*dims):
            size = int(np.prod(shape))
            out.append(vec[pos:pos + size].reshape(shape).copy())
            pos += size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, dims {dims} need {pos}")
        return cls(*out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "SelectorParams":
        return SelectorParams(*(a.copy() for a in self.arrays()))

    def __eq__(self, other):
        if not isinstance(other, SelectorParams):
            return NotImplemented
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))


def init(dim: int = 64, h1: int = 32, h2: int = 8, h3: int = 8, seed: int = 0) -> SelectorParams:
    """Glorot-uniform weights from a seeded stream, zero biases."""
    if min(dim, h1, h2, h3) < 1:
        raise ConfigError("selector dimensions must be positive")
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in SelectorParams.shapes(dim, h1, h2, h3):
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-limit, limit, size=shape))
        else:
            arrays.append(np.zeros(shape))
    return SelectorParams(*arrays)


def _leaky(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ForwardCache:
    params: SelectorParams
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    u: np.ndarray
    z3: np.ndarray
    a3: np.ndarray
    m: np.ndarray

    def pre_activations(self) -> np.ndarray:
        return np.concatenate([self.z1, self.z2, self.z3], axis=1)


def forward_batch(params: SelectorParams, emb: np.ndarray, e: np.ndarray,
                  r: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if not (np.isfinite(x).all() and np.isfinite(e).all() and np.isfinite(r).all()):
        raise ValueError("selector inputs must be finite")
    if x.shape[1] != params.w1.shape[1]:
        raise ValueError(f"embedding width {x.shape[1]} does not match selector dim {params.w1.shape[1]}")
    z1 = x @ params.w1.T + params.b1
    a1 = _leaky(z1)
    z2 = a1 @ params.w2.T + params.b2
    a2 = _leaky(z2)
    u = np.concatenate([a2, e[:, None], r[:, None]], axis=1)
    z3 = u @ params.w3.T + params.b3
    a3 = _leaky(z3)
    z4 = a3 @ params.w4.T + params.b4
    m = _sigmoid(z4[:, 0])
    return m, ForwardCache(params, x, z1, a1, z2, u, z3, a3, m)


def backward_batch(params: SelectorParams, cache: ForwardCache, d_out: np.ndarray
                   ) -> tuple[SelectorParams, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(d_out * m)`` w.r.t. every parameter and every input row.

    Returns ``(param_grads, d_embedding, d_entropy, d_ratio)``.
    """
    if cache.params is not params:
        raise StaleCacheError("forward cache was produced by different parameters")
    d_out = np.asarray(d_out, dtype=np.float64).reshape(-1)
    if d_out.size != cache.m.size:
        raise ValueError("d_out length does not match the cached batch")
    dz4 = (d_out * cache.m * (1.0 - cache.m))[:, None]
    g_w4 = dz4.T @ cache.a3
    g_b4 = dz4.sum(axis=0)
    dz3 = (dz4 @ params.w4) * _leaky_grad(cache.z3)
    g_w3 = dz3.T @ cache.u
    g_b3 = dz3.sum(axis=0)
    du = dz3 @ params.w3
    h2 = params.w2.shape[0]
    dz2 = du[:, :h2] * _leaky_grad(cache.z2)
    g_w2 = dz2.T @ cache.a1
    g_b2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.w2) * _leaky_grad(cache.z1)
    g_w1 = dz1.T @ cache.x
    g_b1 = dz1.sum(axis=0)
    dx = dz1 @ params.w1
    grads = SelectorParams(g_w1, g_b1, g_w2, g_b2, g_w3, g_b3, g_w4, g_b4)
    return grads, dx, du[:, h2], du[:, h2 + 1]


def forward(params: SelectorParams, embedding: np.ndarray, e: float, r: float
            ) -> tuple[float, ForwardCache]:
    m, cache = forward_batch(params, embedding, [e], [r])
    return float(m[0]), cache


def backward(params: SelectorParams, cache: ForwardCache, d_out: float
             ) -> tuple[SelectorParams, np.ndarray, float, float]:
    grads, dx, de, dr = backward_batch(params, cache, [d_out])
    return grads, dx[0], float(de[0]), float(dr[0])


@dataclass(frozen=True)
class ThresholdPolicy:
    tau_low: float = 0.40
    tau_mid: float = 0.50
    tau_high: float = 0.60
    low_band: float = 0.35
    high_band: float = 0.65

    def __post_init__(self):
        if not self.tau_low <= self.tau_mid <= self.tau_high:
            raise ConfigError("thresholds must satisfy tau_low <= tau_mid <= tau_high")
        if not self.low_band < self.high_band:
            raise ConfigError("low_band must be below high_band")

    @classmethod
    def fixed(cls, tau: float) -> "ThresholdPolicy":
        return cls(tau, tau, tau)


def adaptive_threshold(policy: ThresholdPolicy, r: float) -> float:
    if r < policy.low_band:
        return policy.tau_low
    if r > policy.high_band:
        return policy.tau_high
    return policy.tau_mid


def harden(m_wm: float, tau: float) -> int:
    return 1 if m_wm > tau else 0


# -- weight files -----------------------------------------------------------

def dumps(params: SelectorParams) -> str:
    lines = [WEIGHTS_HEADER, " ".join(map(str, params.dims))]
    lines.extend(repr(float(v)) for v in params.flat())
    return "\n".join(lines) + "\n"


def loads(text: str, expect_dims: tuple[int, int, int, int] | None = None) -> SelectorParams:
    lines = text.split("\n")
    header = lines[0] if lines else ""
    if header != WEIGHTS_HEADER:
        if header.startswith("LTW-SELECTOR"):
            raise FormatError(f"unsupported weight file version {header!r}")
        raise FormatError("not a selector weight file")
    try:
        dims = tuple(int(x) for x in lines[1].split())
    except (IndexError, ValueError) as exc:
        raise FormatError("missing dimension line") from exc
    if len(dims) != 4 or min(dims) < 1:
        raise FormatError(f"bad dimension line {lines[1]!r}")
    if expect_dims is not None and dims != tuple(expect_dims):
        raise FormatError(f"weight file dims {dims} do not match expected {tuple(expect_dims)}")
    n = sum(int(np.prod(s)) for s in SelectorParams.shapes(*dims))
    values = [v for v in lines[2:] if v.strip()]
    if len(values) != n:
        raise FormatError(f"weight file holds {len(values)} values, dims {dims} need {n}")
    try:
        flat = np.array([float(v) for v in values])
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return SelectorParams.from_flat(flat, dims)


def save(params: SelectorParams, path: str | Path) -> None:
    Path(path).write_text(dumps(params), encoding="utf-8")


def load(path: str | Path, expect_dims: tuple[int, int, int, int] | None = None) -> SelectorParams:
    return loads(Path(path).read_text(encoding="utf-8"), expect_dims)
