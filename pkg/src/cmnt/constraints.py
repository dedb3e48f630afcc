"""Word-level constraint generation: perfect, noisy and automatic.

All functions here work on words (pre-BPE).  Rarity is corpus frequency, with
ties going to the earlier position in the sentence; punctuation-only tokens
never become constraints.
"""

from __future__ import annotations

import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import DataError

NULL = "<null>"


def is_punctuation(word: str) -> bool:
    return bool(word) and all(unicodedata.category(ch).startswith("P") for ch in word)


@dataclass
class FrequencyTable:
    counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_corpus(cls, sentences: Iterable[Sequence[str]]) -> "FrequencyTable":
        return cls(Counter(w for s in sentences for w in s))

    def __getitem__(self, word: str) -> int:
        return self.counts.get(word, 0)


def rarest_words(words: Sequence[str], freq: FrequencyTable, k: int) -> list[str]:
    """The ``k`` rarest distinct eligible words, in order of first appearance."""
    first: dict[str, int] = {}
    for i, w in enumerate(words):
        if w not in first and not is_punctuation(w):
            first[w] = i
    ranked = sorted(first, key=lambda w: (freq[w], first[w]))[: max(k, 0)]
    return sorted(ranked, key=first.__getitem__)


def extract_perfect_constraints(ref: Sequence[str], freq: FrequencyTable, k: int = 5) -> list[str]:
    return rarest_words(ref, freq, k)


# ---------------------------------------------------------------------------
# Word translation table


@dataclass
class AlignmentTable:
    """``t(target | source)`` per source word plus a target -> sources index."""

    entries: dict[str, dict[str, float]]
    reverse: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.reverse:
            rev = defaultdict(set)
            for s, row in self.entries.items():
                for t in row:
                    rev[t].add(s)
            self.reverse = dict(rev)

    def best(self, source: str) -> Optional[str]:
        row = self.entries.get(source)
        if not row:
            return None
        return min(row.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def targets(self) -> list[str]:
        return sorted(self.reverse)

    def save(self, path) -> None:
        lines = []
        for s in sorted(self.entries):
            for t, p in sorted(self.entries[s].items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"{s}\t{t}\t{p!r}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AlignmentTable":
        entries: dict[str, dict[str, float]] = defaultdict(dict)
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: expected source<TAB>target<TAB>prob")
            entries[parts[0]][parts[1]] = float(parts[2])
        return cls(dict(entries))


def ibm1_probabilities(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], iterations: int) -> dict:
    """IBM Model 1 EM; every target word may also align to a NULL source word."""
    if not pairs:
        raise DataError("cannot build a translation table from an empty corpus")
    if iterations < 1:
        raise ValueError("at least one EM iteration is required")
    tgt_types = {w for _, tgt in pairs for w in tgt}
    uniform = 1.0 / max(1, len(tgt_types))
    t: dict[tuple[str, str], float] = {}
    for src, tgt in pairs:
        for s in list(src) + [NULL]:
            for w in tgt:
                t[(s, w)] = uniform
    for _ in range(iterations):
        count: dict[tuple[str, str], float] = defaultdict(float)
        total: dict[str, float] = defaultdict(float)
        for src, tgt in pairs:
            sources = list(src) + [NULL]
            for w in tgt:
                z = sum(t[(s, w)] for s in sources)
                for s in sources:
                    share = t[(s, w)] / z
                    count[(s, w)] += share
                    total[s] += share
        t = {(s, w): c / total[s] for (s, w), c in count.items()}
    table: dict[str, dict[str, float]] = defaultdict(dict)
    for (s, w), p in t.items():
        table[s][w] = p
    return dict(table)


def build_alignment_table(
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    em_iterations: int = 5,
    prune_threshold: float = 0.05,
) -> AlignmentTable:
    """Pruned and renormalised IBM Model 1 table (the NULL row is dropped)."""
    probs = ibm1_probabilities(pairs, em_iterations)
    entries = {}
    for s, row in probs.items():
        if s == NULL:
            continue
        kept = {w: p for w, p in row.items() if p > prune_threshold}
        z = sum(kept.values())
        if kept:
            entries[s] = {w: p / z for w, p in kept.items()}
    return AlignmentTable(entries)


def replacing_candidates(word: str, table: AlignmentTable) -> set[str]:
    """Target words sharing some source-side entry with ``word``."""
    out = set()
    for s in table.reverse.get(word, ()):
        out.update(table.entries[s])
    out.discard(word)
    return out


# ---------------------------------------------------------------------------
# Noise


def _replacement(word: str, ref_words: set, table: AlignmentTable, fallback: Sequence[str], rng) -> str:
    cands = sorted(w for w in replacing_candidates(word, table) if w not in ref_words)
    if not cands:
        cands = sorted(w for w in fallback if w not in ref_words and not is_punctuation(w))
    if not cands:
        raise DataError(f"no replacement for {word!r} avoids the reference")
    return cands[int(rng.integers(len(cands)))]


def inject_noise(
    constraints: Sequence[str],
    ref: Sequence[str],
    table: AlignmentTable,
    p: float,
    seed: int,
    fallback: Optional[Sequence[str]] = None,
) -> tuple[list[str], list[int]]:
    """Replace each constraint with probability ``p`` by a word absent from ``ref``.

    Replacements come uniformly from the word's replacing candidates, or from
    ``fallback`` (default: every target word in the table) when none avoid the
    reference.  Returns the noisy constraints and the replaced positions.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("replace probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    ref_words = set(ref)
    fallback = table.targets() if fallback is None else fallback
    out, positions = list(constraints), []
    draws = rng.random(len(out))
    for i, w in enumerate(constraints):
        if draws[i] < p:
            out[i] = _replacement(w, ref_words, table, fallback, rng)
            positions.append(i)
    return out, positions


def fixed_noise_count(
    constraints: Sequence[str],
    ref: Sequence[str],
    table: AlignmentTable,
    n: int,
    seed: int,
    fallback: Optional[Sequence[str]] = None,
    size: Optional[int] = 5,
) -> tuple[list[str], list[int]]:
    """Noise exactly ``n`` uniformly chosen positions.

    For a fixed seed the noised positions and their replacements are nested
    across ``n``: raising the count only adds noise.  ``size=None`` lifts the
    five-constraint requirement.
    """
    if size is not None and len(constraints) != size:
        raise ValueError(f"expected {size} constraints, got {len(constraints)}")
    if not 0 <= n <= len(constraints):
        raise ValueError(f"noise count {n} outside 0..{len(constraints)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(constraints))
    ref_words = set(ref)
    fallback = table.targets() if fallback is None else fallback
    replaced = {int(i): _replacement(constraints[i], ref_words, table, fallback, rng) for i in order}
    positions = sorted(int(i) for i in order[:n])
    out = list(constraints)
    for i in positions:
        out[i] = replaced[i]
    return out, positions


# ---------------------------------------------------------------------------
# Automatic constraints


def auto_constraints(src: Sequence[str], src_freq: FrequencyTable, table: AlignmentTable, k: int = 5) -> list[str]:
    """Translate the ``k`` rarest source words through the table; unknown words are skipped."""
    picked = rarest_words(src, src_freq, k)
    return [table.best(w) for w in picked if table.best(w) is not None]


def noisy_rate(constraints: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Fraction of constraint words absent from their reference."""
    total = noisy = 0
    for cs, ref in zip(constraints, refs, strict=True):
        words = set(ref)
        total += len(cs)
        noisy += sum(w not in words for w in cs)
    return noisy / total if total else 0.0


def write_noise_positions(path, positions: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(",".join(map(str, p)) + "\n" for p in positions), encoding="utf-8")
