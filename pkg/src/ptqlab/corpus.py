"""Deterministic synthetic English-like text for training toy models offline.

The generator is a small stochastic grammar with Zipf-weighted word choice,
so byte-level models see spelling, agreement-free syntax, punctuation and
paragraph structure without needing any downloaded dataset.
"""

from __future__ import annotations

import numpy as np

_NOUNS = (
    "river stone garden window letter market village teacher doctor engine "
    "mountain harbor lantern question answer morning evening winter summer "
    "library kitchen bridge forest island machine signal pattern number "
    "circle story picture friend stranger captain farmer painter student "
    "family city road field cloud storm candle mirror clock bottle basket"
).split()
_VERBS = (
    "found carried opened watched followed crossed painted measured counted "
    "remembered described built repaired visited noticed answered moved "
    "lifted pulled closed wrote read heard saw kept left"
).split()
_INTRANSITIVE = "slept waited laughed returned vanished arrived stayed listened".split()
_ADJS = (
    "old small quiet bright heavy narrow golden distant strange careful "
    "green empty wooden silent warm cold early late simple broken"
).split()
_ADVS = "slowly quickly quietly again together carefully suddenly often".split()
_PREPS = "near behind across under beside through over into".split()
_NAMES = "Anna Tomas Mira Elias Clara Jonas Lena Victor Iris Paul".split()
_DETS = "the the the a this that every one".split()
_CONJ = "and but so while because".split()


def _zipf(n: int) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1)
    return p / p.sum()


class _Grammar:
    def __init__(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)
        self.weights = {
            id(words): _zipf(len(words))
            for words in (_NOUNS, _VERBS, _INTRANSITIVE, _ADJS, _ADVS, _PREPS, _NAMES, _DETS, _CONJ)
        }

    def pick(self, words: list[str]) -> str:
        return words[self.rng.choice(len(words), p=self.weights[id(words)])]

    def noun_phrase(self) -> str:
        r = self.rng.random()
        if r < 0.2:
            return self.pick(_NAMES)
        det = self.pick(_DETS)
        noun = self.pick(_NOUNS)
        if det == "a" and noun[0] in "aeiou":
            det = "an"
        if r < 0.55:
            adj = self.pick(_ADJS)
            if det == "an" or det == "a":
                det = "an" if adj[0] in "aeiou" else "a"
            return f"{det} {adj} {noun}"
        if r < 0.62:
            return f"{det} {noun} of the {self.pick(_NOUNS)}"
        return f"{det} {noun}"

    def verb_phrase(self) -> str:
        r = self.rng.random()
        if r < 0.55:
            vp = f"{self.pick(_VERBS)} {self.noun_phrase()}"
        elif r < 0.8:
            vp = f"{self.pick(_INTRANSITIVE)} {self.pick(_ADVS)}"
        else:
            vp = self.pick(_INTRANSITIVE)
        if self.rng.random() < 0.3:
            vp += f" {self.pick(_PREPS)} {self.noun_phrase()}"
        return vp

    def clause(self) -> str:
        return f"{self.noun_phrase()} {self.verb_phrase()}"

    def sentence(self) -> str:
        r = self.rng.random()
        if r < 0.15:
            body = f"{self.pick(_NAMES)} said that {self.clause()}"
        elif r < 0.35:
            body = f"{self.clause()}, {self.pick(_CONJ)} {self.clause()}"
        elif r < 0.42:
            n = int(self.rng.integers(2, 100))
            body = f"{self.noun_phrase()} {self.pick(_VERBS)} {n} {self.pick(_NOUNS)}s"
        else:
            body = self.clause()
        end = "?" if self.rng.random() < 0.05 else "."
        return body[0].upper() + body[1:] + end


def synthetic_corpus(n_bytes: int = 400_000, seed: int = 0) -> bytes:
    """Return exactly ``n_bytes`` of ASCII text generated from ``seed``."""
    g = _Grammar(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        para = " ".join(g.sentence() for _ in range(int(g.rng.integers(3, 8)))) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]
