"""Selector training: soft rollouts, the quality and detectability objectives,
min-norm (MGDA) combination of their gradients, and Adam.

A rollout splits into constants and a differentiable part. The constants
(sampled tokens, unbiased logits, green masks, window embeddings, entropies
and ratios) are fixed once the tokens are drawn. Everything that depends on
the selector weights is recomputed from them by :func:`evaluate`, and the loss
gradients flow back through the soft mask of every step only. Ratios are the
running mean of earlier soft masks and are held constant.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ltw import embedder, selector as sel
from ltw.errors import ConfigError, TrainingDiverged
from ltw.partition import HashScheme, mask_for_step
from ltw.selector import SelectorParams
from ltw.token_model import EOS_ID, SamplerConfig, TokenModel, entropy, sample, softmax

BCE_CLAMP = 1e-7
HISTORY_FIELDS = ("step", "L_Q", "L_D", "z_mean", "lambda_star", "wall_ms")


@dataclass(frozen=True)
class LossWeights:
    lambda_sim: float = 1.0
    lambda_entropy: float = 1.0
    lambda_fix: float = 1.0
    lambda_z: float = 0.05
    lambda_wm: float = 1.0
    lambda_e: float = 2.0
    mu_e: float = 1.2

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value):
                raise ConfigError(f"{name} must be finite")
            if name != "mu_e" and value < 0:
                raise ConfigError(f"{name} must be non-negative")


# -- rollouts -----------------------------------------------------------------

@dataclass
class RolloutInputs:
    """Per-step quantities that do not depend on the selector weights."""

    tokens: np.ndarray  # (T,) sampled ids
    emb: np.ndarray  # (T, dim)
    e: np.ndarray  # (T,)
    r: np.ndarray  # (T,)
    logits: np.ndarray  # (T, V) unbiased
    green: np.ndarray  # (T, V) 0/1

    def __len__(self):
        return int(self.e.size)


@dataclass
class RolloutValues:
    m: np.ndarray  # (T,) soft masks
    p_gr: np.ndarray  # (T,) green mass of the biased softmax
    probs_w: np.ndarray  # (T, V) biased softmax
    probs_s: np.ndarray  # (T, V) unbiased softmax
    E_w: np.ndarray
    E_s: np.ndarray
    cache: sel.ForwardCache


@dataclass
class TrainRollout:
    inputs: RolloutInputs
    values: RolloutValues
    delta: float
    gamma: float

    @property
    def m(self):
        return self.values.m

    @property
    def p_gr(self):
        return self.values.p_gr

    @property
    def E_w(self):
        return self.values.E_w

    @property
    def E_s(self):
        return self.values.E_s

    @property
    def e(self):
        return self.inputs.e

    @property
    def r(self):
        return self.inputs.r


def _row_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    return z / z.sum(axis=1, keepdims=True)


def evaluate(params: SelectorParams, inputs: RolloutInputs, delta: float) -> RolloutValues:
    m, cache = sel.forward_batch(params, inputs.emb, inputs.e, inputs.r)
    probs_w = _row_softmax(inputs.logits + delta * m[:, None] * inputs.green)
    probs_s = _row_softmax(inputs.logits.copy())
    p_gr = (probs_w * inputs.green).sum(axis=1)
    V = inputs.logits.shape[1]
    dim = params.dims[0]
    return RolloutValues(m, p_gr, probs_w, probs_s,
                         embedder.expected_embedding(probs_w, V, dim),
                         embedder.expected_embedding(probs_s, V, dim), cache)


def soft_rollout(model: TokenModel, params: SelectorParams, scheme: HashScheme, gamma: float,
                 delta: float, sampler: SamplerConfig, prompt: Sequence[int], max_len: int,
                 rng: np.random.Generator, *, window: int = embedder.DEFAULT_WINDOW
                 ) -> TrainRollout:
    """Generate with the continuous mask scaling the bias and record what training needs."""
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    seq = [int(t) for t in prompt]
    V, dim = model.vocab_size, params.dims[0]
    toks, embs, ents, ratios, logit_rows, greens = [], [], [], [], [], []
    m_sum = 0.0
    for t in range(max_len):
        logits = model.logits(seq)
        e = entropy(softmax(logits))
        r = m_sum / t if t else 0.0
        emb = embedder.embed_window(seq[-window:], V, dim)
        m, _ = sel.forward(params, emb, e, r)
        green = mask_for_step(scheme, V, gamma, seq[-1]).bits
        probs = softmax(logits + (delta * m) * green, sampler.temperature)
        y = sample(probs, sampler, seq, rng)
        toks.append(y)
        embs.append(emb)
        ents.append(e)
        ratios.append(r)
        logit_rows.append(logits)
        greens.append(green)
        m_sum += m
        seq.append(y)
        if y == EOS_ID:
            break
    inputs = RolloutInputs(np.array(toks), np.array(embs), np.array(ents), np.array(ratios),
                           np.array(logit_rows), np.array(greens, dtype=np.float64))
    return TrainRollout(inputs, evaluate(params, inputs, delta), delta, gamma)


# -- loss terms ---------------------------------------------------------------

def loss_similarity(E_w: np.ndarray, E_s: np.ndarray) -> float:
    return -embedder.cosine_similarity(E_w, E_s)


def entropy_target(e, lambda_e: float, mu_e: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-lambda_e * (np.asarray(e, dtype=np.float64) - mu_e)))


def loss_entropy(m_wm, e, lambda_e: float, mu_e: float) -> float:
    m = np.asarray(m_wm, dtype=np.float64)
    if m.shape != np.shape(e):
        raise ValueError("mask and entropy sequences differ in length")
    q = entropy_target(e, lambda_e, mu_e)
    p = np.clip(m, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(-(q * np.log(p) + (1.0 - q) * np.log(1.0 - p))))


def relaxed_z(p_gr, m_wm, gamma: float) -> float:
    p_gr = np.asarray(p_gr, dtype=np.float64)
    m = np.asarray(m_wm, dtype=np.float64)
    total = m.sum()
    if not total > 0:
        raise ValueError("relaxed z needs a positive total mask")
    return float(((p_gr * m).sum() - gamma * total) / math.sqrt(gamma * (1.0 - gamma) * total))


def ratio_target(r, kind: str = "linear") -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if kind == "linear":
        return 1.0 - r
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(4.0 * (r - 0.5)))
    raise ConfigError(f"unknown ratio target {kind!r}")


def loss_ratio(m_wm, r, f_kind: str = "linear") -> float:
    m = np.asarray(m_wm, dtype=np.float64)
    return float(np.mean((m - ratio_target(r, f_kind)) ** 2))


def loss_output_fix(m_wm) -> float:
    m = np.asarray(m_wm, dtype=np.float64)
    return float(-np.mean((m - 0.5) ** 2))


@dataclass
class LossBundle:
    """Losses of one rollout with their per-step mask gradients."""

    L_Q: float
    L_D: float
    components: dict[str, float]
    dLQ_dm: np.ndarray
    dLD_dm: np.ndarray


def compose_losses(rollout: TrainRollout, weights: LossWeights, f_kind: str = "linear"
                   ) -> tuple[float, float, dict[str, float]]:
    v, x = rollout.values, rollout.inputs
    comp = {
        "similarity": loss_similarity(v.E_w, v.E_s),
        "entropy": loss_entropy(v.m, x.e, weights.lambda_e, weights.mu_e),
        "output_fix": loss_output_fix(v.m),
        "z": relaxed_z(v.p_gr, v.m, rollout.gamma),
        "ratio": loss_ratio(v.m, x.r, f_kind),
    }
    L_Q = (weights.lambda_sim * comp["similarity"] + weights.lambda_entropy * comp["entropy"]
           + weights.lambda_fix * comp["output_fix"])
    L_D = (-weights.lambda_z * comp["z"] + weights.lambda_wm * comp["ratio"]
           + weights.lambda_fix * comp["output_fix"])
    return L_Q, L_D, comp


def mask_gradients(rollout: TrainRollout, weights: LossWeights, f_kind: str = "linear"
                   ) -> tuple[np.ndarray, np.ndarray]:
    """dL_Q/dm_t and dL_D/dm_t for every step of one rollout."""
    v, x = rollout.values, rollout.inputs
    delta, gamma = rollout.delta, rollout.gamma
    m = v.m
    T = m.size

    # similarity: E_w moves with m_t through the biased softmax of step t
    Ew, Es = v.E_w, v.E_s
    nw, ns = np.linalg.norm(Ew), np.linalg.norm(Es)
    cos = float(Ew @ Es) / (nw * ns)
    dLs_dEw = -(Es / (nw * ns) - cos * Ew / nw ** 2)
    phi_g = embedder.feature_matrix(x.logits.shape[1], Ew.size) @ dLs_dEw
    dp_dm = delta * v.probs_w * (x.green - v.p_gr[:, None])
    d_sim = (dp_dm @ phi_g) / T

    q = entropy_target(x.e, weights.lambda_e, weights.mu_e)
    p = np.clip(m, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (m > BCE_CLAMP) & (m < 1.0 - BCE_CLAMP)
    d_ent = np.where(inside, (-q / p + (1.0 - q) / (1.0 - p)) / T, 0.0)

    d_fix = -2.0 * (m - 0.5) / T

    c = gamma * (1.0 - gamma)
    S0 = m.sum()
    z = ((v.p_gr * m).sum() - gamma * S0) / math.sqrt(c * S0)
    dpgr_dm = delta * v.p_gr * (1.0 - v.p_gr)
    d_z = (v.p_gr + m * dpgr_dm - gamma) / math.sqrt(c * S0) - z / (2.0 * S0)

    d_ratio = 2.0 * (m - ratio_target(x.r, f_kind)) / T

    dQ = weights.lambda_sim * d_sim + weights.lambda_entropy * d_ent + weights.lambda_fix * d_fix
    dD = -weights.lambda_z * d_z + weights.lambda_wm * d_ratio + weights.lambda_fix * d_fix
    return dQ, dD


def rollout_losses(rollout: TrainRollout, weights: LossWeights, f_kind: str = "linear"
                   ) -> LossBundle:
    L_Q, L_D, comp = compose_losses(rollout, weights, f_kind)
    dQ, dD = mask_gradients(rollout, weights, f_kind)
    return LossBundle(L_Q, L_D, comp, dQ, dD)


def loss_and_grads(params: SelectorParams, rollouts: Sequence[TrainRollout], weights: LossWeights,
                   f_kind: str = "linear") -> tuple[float, float, np.ndarray, np.ndarray, dict]:
    """Batch-averaged L_Q, L_D and their flat parameter gradients."""
    n = len(rollouts)
    if n == 0:
        raise ValueError("empty rollout batch")
    L_Q = L_D = 0.0
    gQ = np.zeros(params.size)
    gD = np.zeros(params.size)
    comps: dict[str, float] = {}
    for ro in rollouts:
        b = rollout_losses(ro, weights, f_kind)
        grads_q, *_ = sel.backward_batch(params, ro.values.cache, b.dLQ_dm)
        grads_d, *_ = sel.backward_batch(params, ro.values.cache, b.dLD_dm)
        L_Q += b.L_Q / n
        L_D += b.L_D / n
        gQ += grads_q.flat() / n
        gD += grads_d.flat() / n
        for k, val in b.components.items():
            comps[k] = comps.get(k, 0.0) + val / n
    return L_Q, L_D, gQ, gD, comps


# -- MGDA and Adam -------------------------------------------------------------

def mgda_lambda(gQ: np.ndarray, gD: np.ndarray) -> float:
    """Weight on gD of the min-norm point of the segment [gQ, gD]."""
    gQ = np.asarray(gQ, dtype=np.float64)
    gD = np.asarray(gD, dtype=np.float64)
    dq = float(gD @ gQ)
    if dq >= float(gD @ gD):
        return 1.0
    if dq >= float(gQ @ gQ):
        return 0.0
    diff = gD - gQ
    return float((gQ - gD) @ gQ) / float(diff @ diff)


def mgda_direction(gQ: np.ndarray, gD: np.ndarray) -> tuple[float, np.ndarray]:
    lam = mgda_lambda(gQ, gD)
    return lam, lam * np.asarray(gD) + (1.0 - lam) * np.asarray(gQ)


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: SelectorParams, lr: float = 1e-4, **kw) -> "OptState":
        return cls(np.zeros(params.size), np.zeros(params.size), lr=lr, **kw)


def adam_step(params: SelectorParams, grad: np.ndarray, opt: OptState) -> SelectorParams:
    """One bias-corrected Adam update; advances ``opt`` in place and returns new params."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != opt.m.shape:
        raise ValueError(f"gradient has {grad.size} entries, optimizer expects {opt.m.size}")
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    flat = params.flat() - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return SelectorParams.from_flat(flat, params.dims)


# -- training loop ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.25
    delta: float = 3.0
    scheme: HashScheme = field(default_factory=HashScheme)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ratio_fn: str = "linear"
    lr: float = 1e-4
    batch_size: int = 5
    max_len: int = 75
    window: int = embedder.DEFAULT_WINDOW
    seed: int = 0
    checkpoint_every: int = 200
    record_time: bool = False


@dataclass
class HistoryRow:
    step: int
    L_Q: float
    L_D: float
    z_mean: float
    lambda_star: float
    wall_ms: float | None = None

    def as_csv(self) -> list[str]:
        wall = "" if self.wall_ms is None else f"{self.wall_ms:.1f}"
        return [str(self.step), repr(self.L_Q), repr(self.L_D), repr(self.z_mean),
                repr(self.lambda_star), wall]


def train_epoch(model: TokenModel, params: SelectorParams, prompts: Sequence[Sequence[int]],
                config: TrainConfig, *, opt: OptState | None = None, step_offset: int = 0,
                checkpoint: Callable[[int, SelectorParams], None] | None = None,
                on_step: Callable[[HistoryRow], None] | None = None
                ) -> tuple[SelectorParams, list[HistoryRow]]:
    """One pass over ``prompts`` in batches; only the selector weights move.

    Each rollout draws from its own generator seeded by ``(seed, prompt index)``
    so results do not depend on batch boundaries. ``checkpoint`` is called every
    ``config.checkpoint_every`` optimizer steps.
    """
    if not prompts:
        raise ValueError("no training prompts")
    if opt is None:
        opt = OptState.for_params(params, config.lr)
    history: list[HistoryRow] = []
    bs = config.batch_size
    for start in range(0, len(prompts), bs):
        t0 = time.perf_counter()
        step = step_offset + start // bs + 1
        rollouts = []
        for i in range(start, min(start + bs, len(prompts))):
            rng = np.random.default_rng([config.seed, step_offset, i])
            rollouts.append(soft_rollout(model, params, config.scheme, config.gamma, config.delta,
                                         config.sampler, prompts[i], config.max_len, rng,
                                         window=config.window))
        L_Q, L_D, gQ, gD, comps = loss_and_grads(params, rollouts, config.weights, config.ratio_fn)
        if not (math.isfinite(L_Q) and math.isfinite(L_D)
                and np.isfinite(gQ).all() and np.isfinite(gD).all()):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: L_Q={L_Q}, L_D={L_D}, components={comps}",
                last_good=params, step=step)
        lam, g = mgda_direction(gQ, gD)
        params = adam_step(params, g, opt)
        wall = (time.perf_counter() - t0) * 1000.0 if config.record_time else None
        row = HistoryRow(step, L_Q, L_D, comps["z"], lam, wall)
        history.append(row)
        if on_step is not None:
            on_step(row)
        if checkpoint is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoint(step, params)
    return params, history


def write_history(rows: Sequence[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in rows:
            w.writerow(row.as_csv())
