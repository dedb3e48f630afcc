"""BPE, vocabularies and assembly of ``(source, reference, constraints)`` tuples."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .memory import ConstraintSet
from .model import BOS, EOS, PAD, UNK

EOW = "</w>"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# Byte pair encoding


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    _ranks: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge in BPE model")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    def segment(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        symbols = _initial_symbols(word)
        while len(symbols) > 1:
            ranked = [(self._ranks.get(p, len(self._ranks)), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
            rank, i = min(ranked)
            if rank == len(self._ranks):
                break
            pair = self.merges[rank]
            out, j = [], 0
            while j < len(symbols):
                if j < len(symbols) - 1 and (symbols[j], symbols[j + 1]) == pair:
                    out.append(symbols[j] + symbols[j + 1])
                    j += 2
                else:
                    out.append(symbols[j])
                    j += 1
            symbols = out
        self._cache[word] = symbols
        return symbols

    def save(self, path) -> None:
        lines = [str(len(self.merges))] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        count = int(lines[0])
        merges = [tuple(line.split(" ")) for line in lines[1 : count + 1]]
        if len(merges) != count or any(len(m) != 2 for m in merges):
            raise DataError(f"BPE file {path} is malformed")
        return cls(merges)


def _initial_symbols(word: str) -> list[str]:
    if not word:
        return []
    chars = list(word)
    return chars[:-1] + [chars[-1] + EOW]


def learn_bpe(corpus: Iterable[Sequence[str]], merges: int) -> BpeModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair."""
    if merges < 0:
        raise ValueError("merge count must be non-negative")
    counts = Counter(w for sentence in corpus for w in sentence)
    if not counts:
        raise DataError("cannot learn BPE from an empty corpus")
    vocab = {tuple(_initial_symbols(w)): c for w, c in counts.items()}
    learned: list[tuple[str, str]] = []
    for _ in range(merges):
        pairs: Counter = Counter()
        for symbols, c in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        learned.append(best)
        merged = {}
        for symbols, c in vocab.items():
            out, j = [], 0
            while j < len(symbols):
                if j < len(symbols) - 1 and (symbols[j], symbols[j + 1]) == best:
                    out.append(symbols[j] + symbols[j + 1])
                    j += 2
                else:
                    out.append(symbols[j])
                    j += 1
            merged[tuple(out)] = merged.get(tuple(out), 0) + c
        vocab = merged
    return BpeModel(learned)


def apply_bpe(model: BpeModel, words: Sequence[str]) -> list[str]:
    return [s for w in words for s in model.segment(w)]


def undo_bpe(subwords: Sequence[str]) -> list[str]:
    words, current = [], ""
    for s in subwords:
        if s.endswith(EOW):
            words.append(current + s[: -len(EOW)])
            current = ""
        else:
            current += s
    if current:
        words.append(current)
    return words


# ---------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Token <-> id map with ``<pad> <s> </s> <unk>`` fixed at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def tokens(self, ids: Sequence[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIALS) :]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary truncated to ``max_size`` ids including specials."""
    if max_size <= len(SPECIALS):
        raise ValueError("max_size must exceed the four special tokens")
    counts = Counter(t for sentence in corpus for t in sentence if t not in SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[: max_size - len(SPECIALS)]])


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetTuple:
    src: list[int]
    ref: list[int]
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    def __post_init__(self):
        if not self.ref or self.ref[-1] != EOS:
            raise ValueError("reference ids must end with EOS")


@dataclass
class TextCodec:
    """BPE models and vocabularies for both sides."""

    src_bpe: BpeModel
    tgt_bpe: BpeModel
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary

    def encode_source(self, words: Sequence[str]) -> list[int]:
        return self.src_vocab.ids(apply_bpe(self.src_bpe, words))

    def encode_target(self, words: Sequence[str]) -> list[int]:
        return self.tgt_vocab.ids(apply_bpe(self.tgt_bpe, words)) + [EOS]

    def encode_constraints(self, words: Sequence[str]) -> ConstraintSet:
        tokens = [tuple(self.tgt_vocab.ids(self.tgt_bpe.segment(w))) for w in words]
        return ConstraintSet(tuple(words), tuple(tokens))

    def word_final_ids(self) -> frozenset[int]:
        """Target ids of subwords that end a word."""
        return frozenset(i for i, t in enumerate(self.tgt_vocab.itos) if t.endswith(EOW))

    def decode_target(self, ids: Sequence[int]) -> list[str]:
        return undo_bpe(self.tgt_vocab.tokens(ids))

    def tuple(self, src: Sequence[str], ref: Sequence[str], cons: Sequence[str] = ()) -> DatasetTuple:
        return DatasetTuple(self.encode_source(src), self.encode_target(ref), self.encode_constraints(cons))


def fit_codec(src_sents, tgt_sents, merges: int = 2000, max_vocab: int = 4000) -> TextCodec:
    src_bpe = learn_bpe(src_sents, merges)
    tgt_bpe = learn_bpe(tgt_sents, merges)
    src_vocab = build_vocab((apply_bpe(src_bpe, s) for s in src_sents), max_vocab)
    tgt_vocab = build_vocab((apply_bpe(tgt_bpe, s) for s in tgt_sents), max_vocab)
    return TextCodec(src_bpe, tgt_bpe, src_vocab, tgt_vocab)


def read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def read_constraints(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [[w for w in line.split("\t") if w] for line in lines]


def write_constraints(path, constraints: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join("\t".join(c) + "\n" for c in constraints), encoding="utf-8")


def assemble_dataset(src_path, ref_path, constraints_path, codec: TextCodec) -> list[DatasetTuple]:
    """Line-aligned files to tuples; constraint words go through the target BPE."""
    src = read_lines(src_path)
    ref = read_lines(ref_path)
    cons = read_constraints(constraints_path) if constraints_path else [[] for _ in src]
    if len(src) != len(ref):
        raise DataError(f"source has {len(src)} lines but reference has {len(ref)}")
    if len(cons) != len(src):
        raise DataError(f"source has {len(src)} lines but constraints have {len(cons)}")
    return [codec.tuple(s, r, c) for s, r, c in zip(src, ref, cons)]
