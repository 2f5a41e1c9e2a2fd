"""Detection metrics, the token-substitution attack and the evaluation protocol.

Undetectable texts (no position selected) have no z-score. For ranking metrics
they count as ``-inf`` (the most confidently unwatermarked outcome); mean
z-scores are taken over detectable texts only and the undetectable count is
reported alongside.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import binomtest, rankdata

from ltw import embedder
from ltw import pipeline as pl
from ltw.errors import ConfigError, UndetectableError, ZeroVectorError
from ltw.partition import HashScheme
from ltw.selector import SelectorParams, ThresholdPolicy
from ltw.token_model import SamplerConfig, TokenModel, perplexity

DEFAULT_ATTACK_RATES = (0.05, 0.1, 0.2)
REPORT_FPRS = (0.01, 0.02, 0.10)


# -- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class ScorePair:
    positives: np.ndarray
    negatives: np.ndarray

    @classmethod
    def of(cls, positives: Sequence[float], negatives: Sequence[float]) -> "ScorePair":
        pos = np.asarray(positives, dtype=np.float64).reshape(-1)
        neg = np.asarray(negatives, dtype=np.float64).reshape(-1)
        if pos.size == 0 or neg.size == 0:
            raise ValueError("both positive and negative scores are required")
        if np.isnan(pos).any() or np.isnan(neg).any():
            raise ValueError("scores must not be NaN (map undetectable texts to -inf)")
        return cls(pos, neg)


def _pair(scores) -> ScorePair:
    return scores if isinstance(scores, ScorePair) else ScorePair.of(*scores)


def auroc(scores: ScorePair) -> float:
    """Mann-Whitney estimate of P(pos > neg), ties counted as one half."""
    s = _pair(scores)
    n_pos, n_neg = s.positives.size, s.negatives.size
    ranks = rankdata(np.concatenate([s.positives, s.negatives]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _rates_at(s: ScorePair, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fractions of positives and negatives with score >= each threshold."""
    pos = np.sort(s.positives)
    neg = np.sort(s.negatives)
    tpr = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    return tpr, fpr


def best_f1(scores: ScorePair) -> float:
    s = _pair(scores)
    thresholds = np.unique(np.concatenate([s.positives, s.negatives]))
    tpr, fpr = _rates_at(s, thresholds)
    tp = tpr * s.positives.size
    fp = fpr * s.negatives.size
    fn = s.positives.size - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.max())


def tpr_at_fpr(scores: ScorePair, fpr: float) -> float:
    """TPR at the smallest threshold whose empirical FPR does not exceed ``fpr``."""
    if not 0.0 <= fpr < 1.0:
        raise ValueError("fpr must lie in [0, 1)")
    s = _pair(scores)
    thresholds = np.append(np.unique(np.concatenate([s.positives, s.negatives])), np.inf)
    tpr, neg_rate = _rates_at(s, thresholds)
    ok = np.flatnonzero(neg_rate <= fpr + 1e-12)
    return float(tpr[ok[0]])


def sign_test(lower: Sequence[float], higher: Sequence[float]) -> tuple[int, int, float]:
    """One-sided paired sign test that ``lower`` tends to be below ``higher``.

    Returns ``(wins, non_ties, p_value)``.
    """
    a = np.asarray(lower, dtype=np.float64)
    b = np.asarray(higher, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples differ in length")
    wins = int((a < b).sum())
    n = int((a != b).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


# -- attack -----------------------------------------------------------------------

def substitution_attack(tokens: Sequence[int], rate: float, model: TokenModel,
                        rng: np.random.Generator) -> list[int]:
    """Replace each token with probability ``rate`` by a different unigram draw.

    Consumes one uniform per position, plus one per replaced position.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("attack rate must lie in [0, 1)")
    out = [int(t) for t in tokens]
    if out and not 0 <= min(out) <= max(out) < model.vocab_size:
        raise ValueError("token id outside the model vocabulary")
    hits = rng.random(len(out)) < rate
    if not hits.any():
        return out
    uni = model.unigram()
    for i in np.flatnonzero(hits):
        w = uni.copy()
        w[out[i]] = 0.0
        cum = np.cumsum(w)
        u = rng.random() * cum[-1]
        out[i] = min(int(np.searchsorted(cum, u, side="right")), w.size - 1)
    return out


# -- modes --------------------------------------------------------------------------

class ModeKind(enum.Enum):
    LTW = "ltw"
    ALWAYS_ON = "always_on"
    ENTROPY_THRESHOLD = "entropy"


@dataclass(frozen=True)
class BaselineMode:
    kind: ModeKind
    threshold: float | None = None

    def __post_init__(self):
        if self.kind is ModeKind.ENTROPY_THRESHOLD:
            if self.threshold is None or not self.threshold >= 0:
                raise ConfigError("entropy-threshold mode needs a threshold >= 0")

    @classmethod
    def parse(cls, text: str) -> "BaselineMode":
        """``ltw``, ``always_on`` or ``entropy:<threshold>``."""
        name, _, arg = text.strip().partition(":")
        try:
            kind = ModeKind(name)
        except ValueError as exc:
            raise ConfigError(f"unknown mode {text!r}") from exc
        if kind is ModeKind.ENTROPY_THRESHOLD:
            return cls(kind, float(arg) if arg else 1.2)
        if arg:
            raise ConfigError(f"mode {name!r} takes no argument")
        return cls(kind)

    @property
    def label(self) -> str:
        if self.kind is ModeKind.ENTROPY_THRESHOLD:
            return f"entropy:{self.threshold!r}"
        return self.kind.value


def rule_for(mode: BaselineMode, model: TokenModel, selector: SelectorParams | None,
             policy: ThresholdPolicy, window: int) -> pl.SelectionRule:
    if mode.kind is ModeKind.ALWAYS_ON:
        return pl.AlwaysOnRule()
    if mode.kind is ModeKind.ENTROPY_THRESHOLD:
        return pl.EntropyRule(mode.threshold)
    if selector is None:
        raise ConfigError("LTW mode needs trained selector weights")
    return pl.SelectorRule(selector, policy, model.vocab_size, window)


# -- protocol -----------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    gamma: float = 0.25
    delta: float = 3.0
    scheme: HashScheme = field(default_factory=HashScheme)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    window: int = embedder.DEFAULT_WINDOW
    gen_len: int = 200
    gen_slack: int = 25
    attack_rates: tuple[float, ...] = DEFAULT_ATTACK_RATES
    negatives: bool = True
    seed: int = 0

    @property
    def max_len(self) -> int:
        return self.gen_len + self.gen_slack

    @property
    def min_len(self) -> int:
        return max(self.gen_len - self.gen_slack, 0)


@dataclass
class PromptResult:
    prompt_id: int
    mode: str
    n_tokens: int
    n_scored: int
    z: float  # NaN when undetectable
    z_attacked: dict[float, float]
    z_negative: float
    perplexity: float
    cos_sim: float
    record: pl.GenerationRecord | None = None


def _z_or_nan(model, rule, cfg: EvalConfig, ids, prompt_len) -> tuple[float, int]:
    try:
        res = pl.detect_with(model, rule, cfg.scheme, cfg.gamma, ids, prompt_len,
                             window=cfg.window)
    except UndetectableError:
        return math.nan, 0
    return res.z, res.n_scored


def _cos(a_ids, b_ids, vocab_size) -> float:
    try:
        return embedder.cosine_similarity(embedder.embed_bag(a_ids, vocab_size),
                                          embedder.embed_bag(b_ids, vocab_size))
    except ZeroVectorError:
        return math.nan


def evaluate_prompt(model: TokenModel, rule: pl.SelectionRule, mode_label: str, prompt_id: int,
                    prompt: Sequence[int], reference: Sequence[int], cfg: EvalConfig,
                    keep_record: bool = False) -> PromptResult:
    """Generate, score and attack one prompt.

    Random streams are keyed by ``(seed, prompt_id, purpose)`` so every mode
    sees the same draws for the same prompt.
    """
    rec = pl.generate(model, rule, cfg.scheme, cfg.gamma, cfg.delta, cfg.sampler, prompt,
                      cfg.max_len, np.random.default_rng([cfg.seed, prompt_id, 0]),
                      min_len=cfg.min_len, window=cfg.window)
    z, n_scored = _z_or_nan(model, rule, cfg, rec.full, len(prompt))
    attacked = {}
    for j, rate in enumerate(cfg.attack_rates):
        out = substitution_attack(rec.output, rate, model,
                                  np.random.default_rng([cfg.seed, prompt_id, 2, j]))
        attacked[rate] = _z_or_nan(model, rule, cfg, list(prompt) + out, len(prompt))[0]
    z_neg = math.nan
    if cfg.negatives:
        neg = pl.generate(model, pl.NeverRule(), cfg.scheme, cfg.gamma, 0.0, cfg.sampler, prompt,
                          cfg.max_len, np.random.default_rng([cfg.seed, prompt_id, 1]),
                          min_len=cfg.min_len, window=cfg.window)
        z_neg = _z_or_nan(model, rule, cfg, neg.full, len(prompt))[0]
    ppl = perplexity(model, rec.full, len(prompt))
    cos = _cos(rec.output, reference, model.vocab_size) if len(reference) else math.nan
    return PromptResult(prompt_id, mode_label, len(rec.output), n_scored, z, attacked, z_neg,
                        ppl, cos, rec if keep_record else None)


def run_eval(model: TokenModel, selector: SelectorParams | None, mode: BaselineMode,
             prompts: Sequence[tuple[Sequence[int], Sequence[int]]], config: EvalConfig,
             keep_records: bool = False) -> list[PromptResult]:
    """Evaluate ``mode`` on every ``(prompt, reference)`` pair."""
    rule = rule_for(mode, model, selector, config.policy, config.window)
    return [evaluate_prompt(model, rule, mode.label, i, p, ref, config, keep_records)
            for i, (p, ref) in enumerate(prompts)]


def ranking_scores(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.where(np.isnan(v), -np.inf, v)


@dataclass
class DetectionSummary:
    auroc: float
    best_f1: float
    tpr: dict[float, float]
    mean_z: float
    n_undetectable: int


def summarize_scores(pos: Sequence[float], neg: Sequence[float],
                     fprs: Sequence[float] = REPORT_FPRS) -> DetectionSummary:
    pair = ScorePair.of(ranking_scores(pos), ranking_scores(neg))
    pos = np.asarray(pos, dtype=np.float64)
    finite = pos[~np.isnan(pos)]
    return DetectionSummary(auroc(pair), best_f1(pair), {f: tpr_at_fpr(pair, f) for f in fprs},
                            float(finite.mean()) if finite.size else math.nan,
                            int(np.isnan(pos).sum()))


@dataclass
class ModeSummary:
    mode: str
    n_prompts: int
    clean: DetectionSummary
    attacked: dict[float, DetectionSummary]
    mean_abs_negative_z: float
    mean_perplexity: float
    mean_cos_sim: float
    mean_selected_fraction: float


def summarize(results: Sequence[PromptResult]) -> ModeSummary:
    if not results:
        raise ValueError("no results to summarize")
    neg = np.array([r.z_negative for r in results])
    if np.isnan(neg).all():
        raise ValueError("summaries need unwatermarked negatives")
    rates = list(results[0].z_attacked)
    clean = summarize_scores([r.z for r in results], neg)
    attacked = {rate: summarize_scores([r.z_attacked[rate] for r in results], neg)
                for rate in rates}
    cos = np.array([r.cos_sim for r in results])
    return ModeSummary(
        results[0].mode, len(results), clean, attacked,
        float(np.nanmean(np.abs(neg))) if (~np.isnan(neg)).any() else math.nan,
        float(np.mean([r.perplexity for r in results])),
        float(np.nanmean(cos)) if (~np.isnan(cos)).any() else math.nan,
        float(np.mean([r.n_scored / r.n_tokens for r in results])))


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def format_summary(s: ModeSummary) -> str:
    lines = [f"[{s.mode}] prompts={s.n_prompts}",
             f"  perplexity={_fmt(s.mean_perplexity)} cos_sim={_fmt(s.mean_cos_sim)} "
             f"selected_fraction={_fmt(s.mean_selected_fraction)} "
             f"mean_abs_unwatermarked_z={_fmt(s.mean_abs_negative_z)}"]
    for name, d in [("clean", s.clean)] + [(f"attack {r!r}", d) for r, d in s.attacked.items()]:
        tprs = " ".join(f"TPR@{round(f * 100)}%={_fmt(v)}" for f, v in d.tpr.items())
        lines.append(f"  {name}: AUROC={_fmt(d.auroc)} best_F1={_fmt(d.best_f1)} {tprs} "
                     f"mean_z={_fmt(d.mean_z)} undetectable={d.n_undetectable}")
    return "\n".join(lines) + "\n"


def report_csv(results: Sequence[PromptResult]) -> str:
    rates = list(results[0].z_attacked) if results else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt_id", "mode", "n_tokens", "n_scored", "z_clean",
                *(f"z_attack_{r!r}" for r in rates), "z_unwatermarked", "ppl", "cos_sim"])
    for r in results:
        w.writerow([r.prompt_id, r.mode, r.n_tokens, r.n_scored, repr(r.z),
                    *(repr(r.z_attacked[rate]) for rate in rates), repr(r.z_negative),
                    repr(r.perplexity), repr(r.cos_sim)])
    return buf.getvalue()
