"""Deterministic synthetic news-like corpus and prompt slicing.

The generator is a small probabilistic grammar over a fixed function-word
inventory and seeded pseudo-word content classes, with a per-document topic
that reweights content words. That gives the n-gram model the mix of
near-deterministic positions (after a preposition, at sentence ends) and
open-class positions (after a determiner) that entropy-aware selection needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from ltw.token_model import TokenModel, tokenize

DETERMINERS = ["the", "a", "this", "that", "every", "some"]
PREPOSITIONS = ["of", "in", "on", "with", "for", "from", "by", "about"]
CONJUNCTIONS = ["and", "but", "while", "because"]
PRONOUNS = ["it", "they", "we", "she", "he"]
AUXILIARIES = ["will", "can", "must", "did"]
OPENERS = [["on", "the", "other", "hand", ","], ["at", "the", "same", "time", ","],
           ["in", "the", "end", ","], ["according", "to", "the", "report", ","],
           ["as", "a", "result", ","], ["for", "the", "first", "time", ","]]

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gr", "kl", "pl", "st", "tr", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ei"]
_CODAS = ["", "n", "r", "l", "s", "m", "k", "nd", "st"]


def _pseudo_words(rng: np.random.Generator, n: int, suffix: str, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syll = int(rng.integers(1, 3))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(syll)) + suffix
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@lru_cache(maxsize=None)
def _zipf_cdf(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return np.cumsum(w / w.sum())


def _draw(rng: np.random.Generator, n: int, s: float = 1.1) -> int:
    return min(int(np.searchsorted(_zipf_cdf(n, s), rng.random(), side="right")), n - 1)


@dataclass
class Lexicon:
    nouns: list[str]
    verbs: list[str]
    adjectives: list[str]
    adverbs: list[str]
    verb_preps: list[str]


class Grammar:
    def __init__(self, seed: int, n_topics: int = 8):
        rng = np.random.default_rng([seed, 0])
        taken = set(DETERMINERS + PREPOSITIONS + CONJUNCTIONS + PRONOUNS + AUXILIARIES)
        taken.update(w for phrase in OPENERS for w in phrase)
        taken.update(["order", "to", "as", "well"])
        nouns = _pseudo_words(rng, 60, "", taken)
        verbs = _pseudo_words(rng, 40, "s", taken)
        adjs = _pseudo_words(rng, 30, "ic", taken)
        advs = _pseudo_words(rng, 12, "ly", taken)
        preps = [PREPOSITIONS[rng.integers(len(PREPOSITIONS))] for _ in verbs]
        self.lex = Lexicon(nouns, verbs, adjs, advs, preps)
        # multi-token names: every token after the first is fully determined
        self.entities = [_pseudo_words(rng, int(rng.integers(2, 4)), "", taken) for _ in range(12)]
        # each topic favours a slice of every open class, in its own order
        self.topics = []
        for _ in range(n_topics):
            self.topics.append({
                "n": rng.permutation(len(nouns))[:15],
                "v": rng.permutation(len(verbs))[:10],
                "a": rng.permutation(len(adjs))[:8],
            })

    def _pick(self, rng, words, topic_ids, p_topic=0.8):
        if topic_ids is not None and rng.random() < p_topic:
            idx = topic_ids[_draw(rng, len(topic_ids))]
            return words[idx], idx
        idx = _draw(rng, len(words), 1.0)
        return words[idx], idx

    def noun_phrase(self, rng, topic, subject: bool) -> list[str]:
        u = rng.random()
        if subject and u < 0.15:
            return [PRONOUNS[_draw(rng, len(PRONOUNS))]]
        if u < (0.27 if subject else 0.08):
            return list(self.entities[_draw(rng, len(self.entities))])
        det = DETERMINERS[_draw(rng, len(DETERMINERS), 1.6)]
        u = rng.random()
        n_adj = 0 if u < 0.55 else (1 if u < 0.9 else 2)
        adjs = [self._pick(rng, self.lex.adjectives, topic["a"])[0] for _ in range(n_adj)]
        return [det, *adjs, self._pick(rng, self.lex.nouns, topic["n"])[0]]

    def verb_phrase(self, rng, topic) -> list[str]:
        verb, vi = self._pick(rng, self.lex.verbs, topic["v"])
        u = rng.random()
        if u < 0.30:
            return [verb, *self.noun_phrase(rng, topic, False)]
        if u < 0.40:
            tail = (["in", "order", "to", self._pick(rng, self.lex.verbs, topic["v"])[0]]
                    if rng.random() < 0.5 else ["as", "well", "as"])
            return [verb, *self.noun_phrase(rng, topic, False), *tail,
                    *self.noun_phrase(rng, topic, False)]
        if u < 0.65:
            prep = self.lex.verb_preps[vi] if rng.random() < 0.85 else PREPOSITIONS[rng.integers(8)]
            return [verb, *self.noun_phrase(rng, topic, False), prep,
                    *self.noun_phrase(rng, topic, False)]
        if u < 0.80:
            aux = AUXILIARIES[rng.integers(len(AUXILIARIES))]
            return [aux, verb, *self.noun_phrase(rng, topic, False)]
        if u < 0.90:
            return [verb, self.lex.adverbs[_draw(rng, len(self.lex.adverbs))]]
        return [verb]

    def sentence(self, rng, topic) -> list[str]:
        u = rng.random()
        clause = self.noun_phrase(rng, topic, True) + self.verb_phrase(rng, topic)
        if u < 0.20:
            conj = CONJUNCTIONS[rng.integers(len(CONJUNCTIONS))]
            clause += [",", conj] + self.noun_phrase(rng, topic, True) + self.verb_phrase(rng, topic)
        elif u < 0.30:
            prep = PREPOSITIONS[rng.integers(len(PREPOSITIONS))]
            clause = [prep, *self.noun_phrase(rng, topic, False), ","] + clause
        elif u < 0.50:
            clause = OPENERS[_draw(rng, len(OPENERS))] + clause
        return clause + ["."]

    def document(self, rng) -> str:
        topic = self.topics[rng.integers(len(self.topics))]
        target = int(rng.integers(230, 400)) if rng.random() < 0.3 else int(rng.integers(30, 120))
        words: list[str] = []
        while len(words) < target:
            words.extend(self.sentence(rng, topic))
        return " ".join(words)


def synthetic_corpus(target_bytes: int = 1_200_000, seed: int = 0) -> list[str]:
    """Documents (one per line when written out) totalling at least ``target_bytes``."""
    grammar = Grammar(seed)
    rng = np.random.default_rng([seed, 1])
    docs, size = [], 0
    while size < target_bytes:
        doc = grammar.document(rng)
        docs.append(doc)
        size += len(doc.encode("utf-8")) + 1
    return docs


def write_corpus(docs: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(docs) + "\n", encoding="utf-8")


@dataclass
class Split:
    train_docs: list[str]
    eval_docs: list[str]


def split_documents(docs: Sequence[str], n_eval: int, prompt_len: int = 20,
                    reference_len: int = 200) -> Split:
    """Hold out the last ``n_eval`` documents long enough for a prompt plus reference."""
    long_enough = [i for i, d in enumerate(docs) if len(tokenize(d)) >= prompt_len + reference_len]
    held = set(long_enough[len(long_enough) - n_eval:]) if n_eval > 0 else set()
    if len(held) < n_eval:
        raise ValueError(f"only {len(held)} documents are long enough to hold out {n_eval}")
    return Split([d for i, d in enumerate(docs) if i not in held],
                 [d for i, d in enumerate(docs) if i in held])


def prompts_from(docs: Sequence[str], model: TokenModel, prompt_len: int = 20,
                 reference_len: int = 200) -> list[tuple[list[int], list[int]]]:
    """(prompt ids, reference ids) per document with at least one token past the prompt."""
    out = []
    for d in docs:
        ids = model.encode(tokenize(d))
        if len(ids) > prompt_len:
            out.append((ids[:prompt_len], ids[prompt_len:prompt_len + reference_len]))
    return out
