"""Synthetic parallel corpora: a one-to-one word mapping plus local reordering.

Source words follow a Zipf distribution, so the tail is seen only a handful of
times in training; those are the words a plain model gets wrong and the ones
rarity-based constraints pick out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(syllables))


def _lexicon(rng: np.random.Generator, size: int, taken: set) -> list[str]:
    words = []
    while len(words) < size:
        w = _word(rng, int(rng.integers(2, 4)))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class SyntheticTask:
    source_words: list[str]
    mapping: dict[str, str]
    weights: np.ndarray
    window: int

    def translate(self, src: list[str]) -> list[str]:
        out = [self.mapping[w] for w in src]
        return [w for i in range(0, len(out), self.window) for w in reversed(out[i : i + self.window])]

    def sample(self, n: int, seed: int, min_len: int = 6, max_len: int = 10) -> list[tuple[list[str], list[str]]]:
        """``n`` pairs whose source words are distinct within a sentence."""
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            idx = rng.choice(len(self.source_words), size=length, replace=False, p=self.weights)
            src = [self.source_words[i] for i in idx]
            pairs.append((src, self.translate(src)))
        return pairs


def make_task(vocab: int = 300, zipf: float = 1.0, window: int = 3, seed: int = 0) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    taken: set = set()
    src = _lexicon(rng, vocab, taken)
    tgt = [w.upper() for w in _lexicon(rng, vocab, taken)]
    weights = 1.0 / np.arange(1, vocab + 1) ** zipf
    return SyntheticTask(src, dict(zip(src, tgt)), weights / weights.sum(), window)
