"""Selective watermark injection and detection.

Generation and detection walk the same loop: score the prefix with the
language model, take the entropy of the unbiased distribution, read the
watermarked ratio from the decisions so far, embed the last ``k`` tokens and
ask a selection rule whether this position carries the watermark. Detection
therefore reconstructs the exact decision sequence for unmodified text and
only counts green hits where the generator could have biased the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ltw import embedder
from ltw.errors import FormatError, UndetectableError
from ltw.partition import HashScheme, mask_for_step
from ltw.selector import SelectorParams, ThresholdPolicy, adaptive_threshold, forward, harden
from ltw.token_model import (EOS_ID, SamplerConfig, TokenModel, apply_bias, entropy, sample,
                             softmax)

RECORD_HEADER = "LTW-RECORD v1"


def z_score(n_green: int, n_scored: int, gamma: float) -> float:
    if n_scored < 1:
        raise UndetectableError("no tokens were selected for scoring")
    return (n_green - gamma * n_scored) / math.sqrt(n_scored * gamma * (1.0 - gamma))


def z_degradation_check(n_green: int, n_scored: int, gamma: float, extra: int
                        ) -> tuple[float, float]:
    """z before and after ``extra`` unselected tokens (each green with probability
    gamma, so the numerator is unchanged in expectation) join the test."""
    if extra < 1:
        raise ValueError("extra must be >= 1")
    z_orig = z_score(n_green, n_scored, gamma)
    z_new = (n_green - gamma * n_scored) / math.sqrt((n_scored + extra) * gamma * (1.0 - gamma))
    return z_orig, z_new


# -- selection rules ----------------------------------------------------------

class SelectionRule(Protocol):
    """Decides, per position, whether the watermark bias applies.

    ``decide`` returns ``(bit, soft, tau)``: the hard decision, the continuous
    score it was derived from, and the threshold used.
    """

    def decide(self, sequence: Sequence[int], e: float, r: float) -> tuple[int, float, float]: ...


@dataclass
class SelectorRule:
    params: SelectorParams
    policy: ThresholdPolicy
    vocab_size: int
    window: int = embedder.DEFAULT_WINDOW

    def soft(self, sequence: Sequence[int], e: float, r: float) -> float:
        emb = embedder.embed_window(sequence[-self.window:], self.vocab_size, self.params.dims[0])
        m, _ = forward(self.params, emb, e, r)
        return m

    def decide(self, sequence, e, r):
        m = self.soft(sequence, e, r)
        tau = adaptive_threshold(self.policy, r)
        return harden(m, tau), m, tau


class AlwaysOnRule:
    """Every position is watermarked (plain KGW / Unigram)."""

    def decide(self, sequence, e, r):
        return 1, 1.0, 0.0


@dataclass
class EntropyRule:
    """Watermark only when the next-token entropy exceeds a fixed cutoff (SWEET-style)."""

    threshold: float = 1.2

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError("entropy threshold must be >= 0")

    def decide(self, sequence, e, r):
        return (1 if e > self.threshold else 0), e, self.threshold


class NeverRule:
    def decide(self, sequence, e, r):
        return 0, 0.0, math.inf


# -- collector ----------------------------------------------------------------

@dataclass
class CollectorState:
    """Running context for one generation or detection pass."""

    tokens: list[int]
    window: int = embedder.DEFAULT_WINDOW
    decisions: list[int] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return sum(self.decisions) / len(self.decisions) if self.decisions else 0.0

    def recent(self) -> list[int]:
        return self.tokens[-self.window:]

    def push(self, token: int, bit: int) -> None:
        self.tokens.append(int(token))
        self.decisions.append(int(bit))


@dataclass(frozen=True)
class StepAudit:
    entropy: float
    soft: float
    tau: float
    green: bool


@dataclass
class GenerationRecord:
    prompt: list[int]
    output: list[int]
    mask: list[int]
    steps: list[StepAudit]

    @property
    def full(self) -> list[int]:
        return self.prompt + self.output

    @property
    def n_scored(self) -> int:
        return sum(self.mask)

    @property
    def n_green(self) -> int:
        return sum(1 for bit, s in zip(self.mask, self.steps) if bit and s.green)

    def audit_z(self, gamma: float) -> float:
        return z_score(self.n_green, self.n_scored, gamma)


@dataclass
class DetectionResult:
    n_scored: int
    n_green: int
    z: float
    selected_positions: list[int]
    decisions: list[int]
    soft: list[float]
    entropies: list[float]

    @property
    def detectable(self) -> bool:
        return self.n_scored >= 1


def _step_inputs(model: TokenModel, seq: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
    logits = model.logits(seq)
    probs = softmax(logits)
    return logits, probs, entropy(probs)


def generate(model: TokenModel, rule: SelectionRule, scheme: HashScheme, gamma: float,
             delta: float, sampler: SamplerConfig, prompt: Sequence[int], max_len: int,
             rng: np.random.Generator, *, min_len: int = 0,
             window: int = embedder.DEFAULT_WINDOW) -> GenerationRecord:
    """Injection loop with an arbitrary selection rule.

    Selected positions get the full bias ``delta`` on green logits. EOS is
    masked out of the sampling distribution for the first ``min_len`` steps;
    the entropy fed to the rule is always that of the unbiased model.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = CollectorState(list(prompt), window)
    steps: list[StepAudit] = []
    V = model.vocab_size
    for t in range(max_len):
        logits, probs, e = _step_inputs(model, state.tokens)
        bit, soft, tau = rule.decide(state.tokens, e, state.ratio)
        green = mask_for_step(scheme, V, gamma, state.tokens[-1])
        if bit:
            logits = apply_bias(logits, green, delta, 1.0)
        if bit or sampler.temperature != 1.0:
            probs = softmax(logits, sampler.temperature)
        if t < min_len:
            probs = probs.copy()
            probs[EOS_ID] = 0.0
            probs /= probs.sum()
        y = sample(probs, sampler, state.tokens, rng)
        steps.append(StepAudit(e, soft, tau, bool(green.bits[y])))
        state.push(y, bit)
        if y == EOS_ID:
            break
    return GenerationRecord(list(prompt), state.tokens[len(prompt):], state.decisions, steps)


def generate_watermarked(model: TokenModel, selector: SelectorParams, policy: ThresholdPolicy,
                         scheme: HashScheme, gamma: float, delta: float, sampler: SamplerConfig,
                         prompt: Sequence[int], max_len: int, rng: np.random.Generator, *,
                         min_len: int = 0, window: int = embedder.DEFAULT_WINDOW
                         ) -> GenerationRecord:
    rule = SelectorRule(selector, policy, model.vocab_size, window)
    return generate(model, rule, scheme, gamma, delta, sampler, prompt, max_len, rng,
                    min_len=min_len, window=window)


def detect_with(model: TokenModel, rule: SelectionRule, scheme: HashScheme, gamma: float,
                full_text_ids: Sequence[int], prompt_len: int, *,
                window: int = embedder.DEFAULT_WINDOW) -> DetectionResult:
    """Replay the selection rule over ``full_text_ids[prompt_len:]`` and z-test the selected tokens.

    Raises :class:`UndetectableError` (with the partial result attached as
    ``.result``) when no position is selected.
    """
    ids = [int(t) for t in full_text_ids]
    if prompt_len < 1:
        raise ValueError("detection needs at least one prompt token to seed the first partition")
    state = CollectorState(ids[:prompt_len], window)
    selected, soft_vals, ents = [], [], []
    n_green = 0
    V = model.vocab_size
    for t in range(prompt_len, len(ids)):
        _, _, e = _step_inputs(model, state.tokens)
        bit, soft, _ = rule.decide(state.tokens, e, state.ratio)
        if bit:
            selected.append(t)
            if mask_for_step(scheme, V, gamma, ids[t - 1]).bits[ids[t]]:
                n_green += 1
        soft_vals.append(soft)
        ents.append(e)
        state.push(ids[t], bit)
    n_scored = len(selected)
    z = z_score(n_green, n_scored, gamma) if n_scored else math.nan
    result = DetectionResult(n_scored, n_green, z, selected, state.decisions, soft_vals, ents)
    if not n_scored:
        err = UndetectableError("no tokens selected for scoring")
        err.result = result
        raise err
    return result


def detect(model: TokenModel, selector: SelectorParams, policy: ThresholdPolicy,
           scheme: HashScheme, gamma: float, full_text_ids: Sequence[int], prompt_len: int, *,
           window: int = embedder.DEFAULT_WINDOW) -> DetectionResult:
    rule = SelectorRule(selector, policy, model.vocab_size, window)
    return detect_with(model, rule, scheme, gamma, full_text_ids, prompt_len, window=window)


# -- record files -------------------------------------------------------------

def dumps_record(record: GenerationRecord, vocab: Sequence[str] | None = None) -> str:
    lines = [RECORD_HEADER,
             "prompt " + " ".join(map(str, record.prompt)),
             "output " + " ".join(map(str, record.output)),
             "mask " + " ".join(map(str, record.mask))]
    if vocab is not None:
        lines.append("text " + " ".join(vocab[i] for i in record.full))
    lines.append("steps %d" % len(record.steps))
    for s in record.steps:
        lines.append(f"{s.entropy!r} {s.soft!r} {s.tau!r} {int(s.green)}")
    return "\n".join(lines) + "\n"


def loads_record(text: str) -> GenerationRecord:
    lines = text.split("\n")
    if not lines or lines[0] != RECORD_HEADER:
        raise FormatError("not a generation record")
    fields_ = {}
    pos = 1
    try:
        while not lines[pos].startswith("steps "):
            key, _, value = lines[pos].partition(" ")
            fields_[key] = value
            pos += 1
        n_steps = int(lines[pos].split()[1])
        steps = []
        for line in lines[pos + 1:pos + 1 + n_steps]:
            e, s, tau, g = line.split()
            steps.append(StepAudit(float(e), float(s), float(tau), g == "1"))
        ints = {k: [int(x) for x in fields_[k].split()] for k in ("prompt", "output", "mask")}
    except (IndexError, KeyError, ValueError) as exc:
        raise FormatError(f"malformed record: {exc}") from exc
    if len(steps) != n_steps or not (len(ints["output"]) == len(ints["mask"]) == n_steps):
        raise FormatError("record lengths disagree")
    return GenerationRecord(ints["prompt"], ints["output"], ints["mask"], steps)


def save_record(record: GenerationRecord, path: str | Path,
                vocab: Sequence[str] | None = None) -> None:
    Path(path).write_text(dumps_record(record, vocab), encoding="utf-8")


def load_record(path: str | Path) -> GenerationRecord:
    return loads_record(Path(path).read_text(encoding="utf-8"))
