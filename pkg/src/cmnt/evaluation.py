"""Corpus BLEU-4 and decoding-time measurement."""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    bp: float
    hyp_len: int
    ref_len: int

    def fields(self, sec_per_sentence: Optional[float] = None) -> dict[str, str]:
        out = {"bleu": f"{self.bleu:.2f}"}
        out.update({f"p{n + 1}": f"{p:.4f}" for n, p in enumerate(self.precisions)})
        out.update(bp=f"{self.bp:.4f}", hyp_len=str(self.hyp_len), ref_len=str(self.ref_len))
        if sec_per_sentence is not None:
            out["sec_per_sentence"] = f"{sec_per_sentence:.6f}"
        return out

    def render(self, sec_per_sentence: Optional[float] = None) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        text = f"BLEU = {self.bleu:.2f}, {p} (BP={self.bp:.3f}, ratio={self.hyp_len}/{self.ref_len})\n"
        if sec_per_sentence is not None:
            text += f"decoding: {sec_per_sentence:.6f} s/sentence\n"
        text += "\n" + "".join(f"{k}={v}\n" for k, v in self.fields(sec_per_sentence).items())
        return text


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu4(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Case-sensitive corpus BLEU-4 with clipped counts and no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    match = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            match[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(match, total))
    bp = 1.0 if hyp_len >= ref_len else (math.exp(1 - ref_len / hyp_len) if hyp_len else 0.0)
    if min(precisions) == 0.0:
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / 4)
    return BleuReport(100 * score, precisions, bp, hyp_len, ref_len)


def measure_runtime(decode: Callable[[object], object], items: Sequence, repetitions: int = 3) -> float:
    """Mean wall-clock seconds per item, single-threaded, after one warmup pass."""
    if not items:
        raise ValueError("empty test set")
    if repetitions < 3:
        raise ValueError("at least three repetitions are required")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for item in items:
            decode(item)
        times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            for item in items:
                decode(item)
            times.append(time.perf_counter() - start)
    finally:
        torch.set_num_threads(threads)
    return sum(times) / (repetitions * len(items))
