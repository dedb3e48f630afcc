"""Noise-robustness study on a synthetic task.

Trains an unconstrained baseline, fine-tunes a constraint-memory variant on
noisy training constraints, then decodes a test set whose five rarest
reference words are given as constraints with 0-5 of them replaced by noise.

The reported baseline keeps training without constraints for as many epochs
as the fine-tuning run, so both systems see the same amount of training.  It
is decoded with plain beam search and with grid beam search; the fine-tuned
model with plain beam search over ``P(y | x, c)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import constraints as cg
from .corpus import DatasetTuple, TextCodec, fit_codec
from .decoding import beam_search, dba_search, grid_beam_search
from .evaluation import bleu4
from .model import ModelConfig
from .synthetic import make_task
from .training import train

log = logging.getLogger(__name__)


@dataclass
class StudyConfig:
    train_pairs: int = 2000
    test_pairs: int = 100
    task_vocab: int = 3000
    zipf: float = 1.0
    window: int = 3
    min_len: int = 6
    max_len: int = 10
    bpe_merges: int = 2000
    k: int = 5
    train_noise: float = 0.6
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    layers: int = 2
    dropout: float = 0.1
    base_epochs: int = 30
    finetune_epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    beam: int = 4
    encoder: str = "shallow"
    integrator: str = "attn"
    noise_counts: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    seed: int = 0


@dataclass
class StudyResult:
    baseline: float
    gbs: dict[int, float] = field(default_factory=dict)
    dba: dict[int, float] = field(default_factory=dict)
    memory: dict[int, float] = field(default_factory=dict)
    train_losses: dict[str, list[float]] = field(default_factory=dict)

    def table(self) -> str:
        rows = [f"baseline      {self.baseline:6.2f}"]
        for name, scores in (("GBS", self.gbs), ("DBA", self.dba), ("memory", self.memory)):
            rows.append(f"{name:<13} " + " ".join(f"{n}:{scores[n]:6.2f}" for n in sorted(scores)))
        return "\n".join(rows)


def _tuples(codec: TextCodec, pairs, cons) -> list[DatasetTuple]:
    return [codec.tuple(s, r, c) for (s, r), c in zip(pairs, cons)]


def _bleu(codec: TextCodec, hyps, pairs) -> float:
    return bleu4([codec.decode_target(h.tokens) for h in hyps], [r for _, r in pairs]).bleu


def run_noise_study(cfg: StudyConfig, progress: Optional[Callable[[str], None]] = None,
                    with_dba: bool = False) -> StudyResult:
    say = progress or log.info
    task = make_task(cfg.task_vocab, cfg.zipf, cfg.window, cfg.seed)
    train_pairs = task.sample(cfg.train_pairs, cfg.seed + 1, cfg.min_len, cfg.max_len)
    test_pairs = task.sample(cfg.test_pairs, cfg.seed + 2, max(cfg.min_len, cfg.k), cfg.max_len)
    codec = fit_codec([s for s, _ in train_pairs], [r for _, r in train_pairs], cfg.bpe_merges, 10**6)
    freq = cg.FrequencyTable.from_corpus(r for _, r in train_pairs)
    table = cg.build_alignment_table(train_pairs)
    fallback = sorted(freq.counts)

    perfect_train = [cg.extract_perfect_constraints(r, freq, cfg.k) for _, r in train_pairs]
    noisy_train = [cg.inject_noise(c, r, table, cfg.train_noise, cfg.seed * 100003 + i, fallback)[0]
                   for i, (c, (_, r)) in enumerate(zip(perfect_train, train_pairs))]
    perfect_test = [cg.extract_perfect_constraints(r, freq, cfg.k) for _, r in test_pairs]

    max_tokens = 2 * max(len(codec.encode_target(r)) for _, r in train_pairs + test_pairs) + 10
    base_cfg = ModelConfig(
        src_vocab=len(codec.src_vocab), tgt_vocab=len(codec.tgt_vocab), d_model=cfg.d_model, heads=cfg.heads,
        ff_dim=cfg.ff_dim, enc_layers=cfg.layers, dec_layers=cfg.layers, dropout=cfg.dropout, max_len=max_tokens,
    )
    say(f"vocab src={base_cfg.src_vocab} tgt={base_cfg.tgt_vocab}")
    base = train(_tuples(codec, train_pairs, [[]] * len(train_pairs)), base_cfg, cfg.base_epochs, cfg.seed,
                 lr=cfg.lr, batch_size=cfg.batch_size)
    say(f"baseline losses {[round(x, 3) for x in base.epoch_losses]}")
    mem_cfg = base_cfg.with_variant(cfg.encoder, cfg.integrator)
    tuned = train(_tuples(codec, train_pairs, noisy_train), mem_cfg, cfg.finetune_epochs, cfg.seed,
                  init=base.model, lr=cfg.lr, batch_size=cfg.batch_size)
    say(f"fine-tune losses {[round(x, 3) for x in tuned.epoch_losses]}")
    control = train(_tuples(codec, train_pairs, [[]] * len(train_pairs)), base_cfg, cfg.finetune_epochs, cfg.seed,
                    init=base.model, lr=cfg.lr, batch_size=cfg.batch_size)
    say(f"control losses {[round(x, 3) for x in control.epoch_losses]}")

    test_x = [codec.encode_source(s) for s, _ in test_pairs]
    word_final = codec.word_final_ids()
    result = StudyResult(_bleu(codec, [beam_search(control.model, x, beam=cfg.beam) for x in test_x], test_pairs))
    result.train_losses = {"baseline": base.epoch_losses + control.epoch_losses, "memory": tuned.epoch_losses}
    say(f"baseline BLEU {result.baseline:.2f}")
    for n in cfg.noise_counts:
        words = [cg.fixed_noise_count(c, r, table, n, cfg.seed * 100003 + i, fallback, size=None)[0]
                 for i, (c, (_, r)) in enumerate(zip(perfect_test, test_pairs))]
        cons = [codec.encode_constraints(w) for w in words]
        result.memory[n] = _bleu(codec, [beam_search(tuned.model, x, c, beam=cfg.beam)
                                         for x, c in zip(test_x, cons)], test_pairs)
        result.gbs[n] = _bleu(codec, [grid_beam_search(control.model, x, c, beam=cfg.beam, word_final=word_final)
                                      for x, c in zip(test_x, cons)], test_pairs)
        if with_dba:
            result.dba[n] = _bleu(codec, [dba_search(control.model, x, c, beam=cfg.beam, word_final=word_final)
                                          for x, c in zip(test_x, cons)], test_pairs)
        say(f"noise {n}: GBS {result.gbs[n]:.2f} memory {result.memory[n]:.2f}")
    return result
