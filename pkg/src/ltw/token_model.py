"""Word-level n-gram language model with Laplace smoothing, plus the sampling
and scoring helpers the watermarking pipeline needs from a language model.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ltw.errors import ConfigError, FormatError, IngestionError
from ltw.partition import GreenMask

log = logging.getLogger(__name__)

UNK, BOS, EOS = "<unk>", "<bos>", "<eos>"
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIALS = (UNK, BOS, EOS)

NGRAM_HEADER = "LTW-NGRAM v1"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def read_corpus(path: str | Path) -> list[str]:
    """One document per non-blank line."""
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 100
    top_p: float = 0.95
    no_repeat_ngram: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.no_repeat_ngram < 0:
            raise ConfigError("no_repeat_ngram must be >= 0")
        if not self.temperature > 0.0:
            raise ConfigError("temperature must be positive")


class TokenModel:
    """Order-``n`` Markov model: P(v | last n tokens) with add-alpha smoothing.

    Contexts shorter than ``order`` are left-padded with BOS, so a prompt taken
    from the start of a document is scored the way the corpus was counted.
    Instances are treated as immutable once built.
    """

    def __init__(self, order: int, alpha: float, vocab: Sequence[str],
                 counts: dict[tuple[int, ...], dict[int, int]]):
        if order < 1:
            raise ConfigError("order must be >= 1")
        if not alpha > 0:
            raise ConfigError("alpha must be positive")
        if tuple(vocab[:3]) != SPECIALS:
            raise ConfigError(f"vocabulary must start with {SPECIALS}")
        self.order = order
        self.alpha = float(alpha)
        self.vocab = list(vocab)
        self.vocab_size = len(self.vocab)
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.token_to_id) != self.vocab_size:
            raise ConfigError("duplicate token in vocabulary")
        self._table: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, int]] = {}
        for ctx, nxt in counts.items():
            if len(ctx) != order:
                raise ConfigError(f"context {ctx} does not match order {order}")
            ids = np.array(sorted(nxt), dtype=np.int64)
            cnt = np.array([nxt[i] for i in ids], dtype=np.float64)
            if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
                raise ConfigError(f"token id out of range in context {ctx}")
            self._table[tuple(ctx)] = (ids, cnt, int(cnt.sum()))
        self._uniform = np.full(self.vocab_size, -math.log(self.vocab_size))
        self._uniform.flags.writeable = False
        self._logits_cached = lru_cache(maxsize=16384)(self._compute_logits)

    # -- vocabulary -----------------------------------------------------

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    @property
    def counts(self) -> dict[tuple[int, ...], dict[int, int]]:
        return {ctx: {int(i): int(c) for i, c in zip(ids, cnt)}
                for ctx, (ids, cnt, _) in self._table.items()}

    def context_key(self, context: Sequence[int]) -> tuple[int, ...]:
        tail = tuple(int(t) for t in context[-self.order:]) if len(context) else ()
        if len(tail) < self.order:
            tail = (BOS_ID,) * (self.order - len(tail)) + tail
        return tail

    # -- scoring --------------------------------------------------------

    def _compute_logits(self, key: tuple[int, ...]) -> np.ndarray:
        entry = self._table.get(key)
        if entry is None:
            return self._uniform
        ids, cnt, total = entry
        denom = total + self.alpha * self.vocab_size
        out = np.full(self.vocab_size, math.log(self.alpha / denom))
        out[ids] = np.log((cnt + self.alpha) / denom)
        out.flags.writeable = False
        return out

    def logits(self, context: Sequence[int]) -> np.ndarray:
        """Natural-log conditional probabilities of every next token (read-only)."""
        return self._logits_cached(self.context_key(context))

    def unigram(self) -> np.ndarray:
        """Relative frequency of each token as a continuation in the fitted counts."""
        freq = np.zeros(self.vocab_size)
        for ids, cnt, _ in self._table.values():
            np.add.at(freq, ids, cnt)
        total = freq.sum()
        if total == 0:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        return freq / total

    # -- serialization --------------------------------------------------

    def dumps(self) -> str:
        lines = [NGRAM_HEADER, f"order {self.order}", f"alpha {self.alpha!r}",
                 f"vocab {self.vocab_size}", *self.vocab]
        rows = []
        for ctx in sorted(self._table):
            ids, cnt, _ = self._table[ctx]
            prefix = " ".join(map(str, ctx))
            rows.extend(f"{prefix} {int(i)} {int(c)}" for i, c in zip(ids, cnt))
        lines.append(f"counts {len(rows)}")
        lines.extend(rows)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "TokenModel":
        lines = text.split("\n")
        if not lines or lines[0] != NGRAM_HEADER:
            raise FormatError(f"not an {NGRAM_HEADER} file")
        try:
            order = int(_field(lines[1], "order"))
            alpha = float(_field(lines[2], "alpha"))
            n_vocab = int(_field(lines[3], "vocab"))
            vocab = lines[4:4 + n_vocab]
            pos = 4 + n_vocab
            n_rows = int(_field(lines[pos], "counts"))
            counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
            for line in lines[pos + 1:pos + 1 + n_rows]:
                parts = [int(x) for x in line.split()]
                if len(parts) != order + 2:
                    raise FormatError(f"bad count row {line!r}")
                counts[tuple(parts[:order])][parts[order]] = parts[order + 1]
        except (IndexError, ValueError) as exc:
            raise FormatError(f"truncated or malformed model file: {exc}") from exc
        if len(vocab) != n_vocab or sum(len(v) for v in counts.values()) != n_rows:
            raise FormatError("truncated model file")
        return cls(order, alpha, vocab, dict(counts))

    @classmethod
    def load(cls, path: str | Path) -> "TokenModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _field(line: str, name: str) -> str:
    key, _, value = line.partition(" ")
    if key != name:
        raise FormatError(f"expected {name!r} line, got {line!r}")
    return value


def build_vocab(documents: Iterable[Sequence[str]], vocab_cap: int) -> list[str]:
    freq = Counter()
    for doc in documents:
        freq.update(doc)
    for special in SPECIALS:
        freq.pop(special, None)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(SPECIALS) + [tok for tok, _ in ranked[:vocab_cap]]


def fit_ngram(documents: str | Iterable[str], order: int = 2, alpha: float = 0.1,
              vocab_cap: int = 2000) -> TokenModel:
    """Count an n-gram model from raw text.

    ``documents`` is either a single string (one document) or an iterable of
    documents; each is lowercased, whitespace-tokenized, BOS-padded and closed
    with EOS before counting.
    """
    if vocab_cap < 16:
        raise ConfigError(f"vocab_cap must be >= 16, got {vocab_cap}")
    if isinstance(documents, str):
        documents = [documents]
    docs = [tokenize(d) for d in documents]
    docs = [d for d in docs if d]
    if not docs:
        raise IngestionError("corpus contains no tokens")
    vocab = build_vocab(docs, vocab_cap)
    index = {tok: i for i, tok in enumerate(vocab)}
    counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    for doc in docs:
        ids = [BOS_ID] * order + [index.get(t, UNK_ID) for t in doc] + [EOS_ID]
        for i in range(order, len(ids)):
            counts[tuple(ids[i - order:i])][ids[i]] += 1
    return TokenModel(order, alpha, vocab, {k: dict(v) for k, v in counts.items()})


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def apply_bias(logits: np.ndarray, mask: GreenMask | np.ndarray, delta: float,
               m_wm: float = 1.0) -> np.ndarray:
    if delta < 0:
        raise ConfigError("delta must be non-negative")
    bits = mask.bits if isinstance(mask, GreenMask) else np.asarray(mask, dtype=bool)
    return np.asarray(logits, dtype=np.float64) + (delta * m_wm) * bits


def banned_tokens(history: Sequence[int], n: int) -> set[int]:
    """Tokens that would complete an ``n``-gram already present in ``history``."""
    if n <= 0 or len(history) < n - 1:
        return set()
    if n == 1:
        return set(history)
    prefix = tuple(history[len(history) - (n - 1):])
    first = prefix[0]
    banned = set()
    for i in range(len(history) - n + 1):
        if history[i] == first and tuple(history[i:i + n - 1]) == prefix:
            banned.add(history[i + n - 1])
    return banned


def truncate(probs: np.ndarray, config: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Top-k then nucleus truncation; returns candidate ids and renormalized weights."""
    order = np.argsort(-probs, kind="stable")[:config.top_k]
    kept = probs[order]
    kept = kept / kept.sum()
    if config.top_p < 1.0:
        cum = np.cumsum(kept)
        cut = int(np.searchsorted(cum, config.top_p - 1e-12)) + 1
        order, kept = order[:cut], kept[:cut]
        kept = kept / kept.sum()
    return order, kept


def sample(probs: np.ndarray, config: SamplerConfig, history: Sequence[int],
           rng: np.random.Generator) -> int:
    """Draw one token after top-k, top-p and no-repeat-n-gram filtering.

    Consumes exactly one uniform from ``rng`` per call.
    """
    cand, weights = truncate(np.asarray(probs, dtype=np.float64), config)
    banned = banned_tokens(history, config.no_repeat_ngram)
    if banned:
        keep = np.fromiter((int(c) not in banned for c in cand), dtype=bool, count=cand.size)
        if keep.any():
            cand, weights = cand[keep], weights[keep]
        else:
            log.info("no-repeat filter removed every candidate; sampling unfiltered")
    cum = np.cumsum(weights)
    u = rng.random() * cum[-1]
    idx = min(int(np.searchsorted(cum, u, side="right")), cand.size - 1)
    return int(cand[idx])


def perplexity(model: TokenModel, tokens: Sequence[int], start: int = 0) -> float:
    """exp(mean NLL) of ``tokens[start:]``, each conditioned on everything before it."""
    if len(tokens) - start < 1:
        raise ValueError("nothing to score")
    nll = 0.0
    for i in range(start, len(tokens)):
        nll -= model.logits(tokens[:i])[tokens[i]]
    return math.exp(nll / (len(tokens) - start))
