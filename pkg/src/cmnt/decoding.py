"""Beam search (soft constraints), grid beam search and dynamic beam allocation.

Scores are summed natural-log probabilities with no length normalisation.
Every search breaks score ties toward the lexicographically smallest token
sequence, and stops early once the best finished hypothesis outscores every
live one (scores can only fall as hypotheses grow).

Hard decoders track coverage per hypothesis: the set of constraints already
placed and, for multi-subword constraints, a cursor into the one in progress.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .memory import ConstraintSet, contains
from .model import BOS, EOS, PAD, ConstrainedTransformer, DecoderState

NEG_INF = float("-inf")
ORACLE_LIMIT = 10**6


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool = False
    satisfied: tuple[bool, ...] = ()
    met: tuple[bool, ...] = ()
    progress: Optional[tuple[int, int]] = None
    flagged: bool = False
    note: str = ""

    def covered(self, c: ConstraintSet) -> int:
        """Constraint tokens placed so far (the grid/bank index)."""
        n = sum(len(seq) for seq, done in zip(c.tokens, self.met) if done)
        return n + (self.progress[1] if self.progress else 0)

    def key(self):
        return (-self.score, self.tokens)


def default_max_len(model: ConstrainedTransformer, x: Sequence[int]) -> int:
    return min(model.cfg.max_len, 2 * len(x) + 10)


class DecodeSession:
    """One source sentence (and constraint set) bound to a frozen model."""

    def __init__(self, model: ConstrainedTransformer, x: Sequence[int], c: Optional[ConstraintSet] = None):
        self.model = model
        self.c = c or ConstraintSet()
        self.vocab = model.cfg.tgt_vocab
        self.shallow = model.cfg.encoder == "shallow"
        with torch.no_grad():
            enc = model.encode_source(list(x))
            self.root_state = model.init_state(enc, self.c if model.cfg.constrained else None)

    def root(self) -> Hypothesis:
        k = len(self.c)
        return Hypothesis((), 0.0, satisfied=(False,) * k, met=(False,) * k)

    def step(self, state: DecoderState, hyps: Sequence[Hypothesis]) -> tuple[np.ndarray, DecoderState]:
        prev = [h.tokens[-1] if h.tokens else BOS for h in hyps]
        active = None
        if state.memory is not None:
            flags = np.array([h.satisfied for h in hyps], dtype=bool).reshape(len(hyps), len(self.c))
            active = state.memory.active_from_flags(flags)
        with torch.no_grad():
            logp, nxt = self.model.decode_step(state, prev, active)
        logp = logp.numpy().copy()
        logp[:, PAD] = NEG_INF
        logp[:, BOS] = NEG_INF
        return logp, nxt

    def extend(self, h: Hypothesis, tok: int, score: float, **changes) -> Hypothesis:
        tokens = h.tokens + (tok,)
        sat = self.c.advance(h.satisfied, tokens) if self.shallow else h.satisfied
        return replace(h, tokens=tokens, score=score, finished=tok == EOS, satisfied=sat, **changes)

    def rescore(self, tokens: Sequence[int]) -> float:
        """Exact log-probability of a complete token sequence."""
        h, state = self.root(), self.root_state
        for tok in tokens:
            logp, state = self.step(state, [h])
            h = self.extend(h, tok, h.score + float(logp[0, tok]))
        return h.score


def top_candidates(hyps: Sequence[Hypothesis], logp: np.ndarray, k: int) -> list[tuple[float, tuple, int, int]]:
    """Best ``k`` single-token extensions as ``(score, tokens, hyp_index, token)``.

    Exact under ties: every candidate scoring at least the k-th best is
    collected before the lexicographic sort.
    """
    total = np.array([h.score for h in hyps])[:, None] + logp
    flat = total.ravel()
    finite = np.isfinite(flat)
    n = int(finite.sum())
    if n == 0:
        return []
    if n <= k:
        idx = np.nonzero(finite)[0]
    else:
        kth = -np.partition(-flat, k - 1)[k - 1]
        idx = np.nonzero(flat >= kth)[0]
    v = logp.shape[1]
    cands = [(float(flat[i]), hyps[i // v].tokens + (int(i % v),), int(i // v), int(i % v)) for i in idx]
    cands.sort(key=lambda c: (-c[0], c[1]))
    return cands[:k]


def _best(hyps: Sequence[Hypothesis]) -> Hypothesis:
    return min(hyps, key=Hypothesis.key)


def _finish(finished, live, fallback=None) -> Hypothesis:
    if finished:
        return _best(finished)
    if fallback is not None:
        return fallback()
    return replace(_best(live), flagged=True, note="no finished hypothesis within max_len")


def _done(finished, live_scores) -> bool:
    if not live_scores:
        return True
    return bool(finished) and max(h.score for h in finished) >= max(live_scores)


def _only_eos(logp: np.ndarray) -> np.ndarray:
    out = np.full_like(logp, NEG_INF)
    out[:, EOS] = logp[:, EOS]
    return out


def beam_search(
    model: ConstrainedTransformer,
    x: Sequence[int],
    c: Optional[ConstraintSet] = None,
    beam: int = 8,
    max_len: Optional[int] = None,
) -> Hypothesis:
    """Unconstrained beam search over ``P(y | x, c)``; constraints only feed the memory."""
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    max_len = max_len or default_max_len(model, x)
    session = DecodeSession(model, x, c)
    live, state, finished = [session.root()], session.root_state, []
    for t in range(1, max_len + 1):
        logp, stepped = session.step(state, live)
        if t == max_len:
            logp = _only_eos(logp)
        rows, nxt = [], []
        for score, _, hi, tok in top_candidates(live, logp, beam):
            h = session.extend(live[hi], tok, score)
            if h.finished:
                finished.append(h)
            else:
                nxt.append(h)
                rows.append(hi)
        if not nxt or _done(finished, [h.score for h in nxt]):
            live = nxt or live
            break
        live, state = nxt, stepped.select(rows)
    return _finish(finished, live)


# ---------------------------------------------------------------------------
# Hard constraints


def _at_word_start(h: Hypothesis, word_final: Optional[frozenset]) -> bool:
    return word_final is None or not h.tokens or h.tokens[-1] in word_final


def _place(c: ConstraintSet, h: Hypothesis, tok: int, word_final: Optional[frozenset] = None) -> Optional[dict]:
    """Coverage after ``tok`` if it continues or starts a constraint, else None.

    With ``word_final`` (ids of subwords that end a word) a constraint may only
    start where a new word does, so it cannot fuse with a preceding fragment.
    """
    if h.progress is not None:
        ci, cur = h.progress
        if c.tokens[ci][cur] != tok:
            return None
        return _advance_to(c, h.met, ci, cur + 1)
    if not _at_word_start(h, word_final):
        return None
    for ci, seq in enumerate(c.tokens):
        if not h.met[ci] and seq[0] == tok:
            return _advance_to(c, h.met, ci, 1)
    return None


def _advance_to(c: ConstraintSet, met: tuple, ci: int, cur: int) -> dict:
    if cur == len(c.tokens[ci]):
        met = met[:ci] + (True,) + met[ci + 1 :]
        return {"met": met, "progress": None}
    return {"met": met, "progress": (ci, cur)}


def _constraint_tokens(c: ConstraintSet, h: Hypothesis, word_final: Optional[frozenset] = None) -> list[int]:
    if h.progress is not None:
        ci, cur = h.progress
        return [c.tokens[ci][cur]]
    if not _at_word_start(h, word_final):
        return []
    return sorted({seq[0] for ci, seq in enumerate(c.tokens) if not h.met[ci]})


def _force_complete(session: DecodeSession, live: Sequence[Hypothesis]) -> Hypothesis:
    """Append whatever constraint tokens are missing, then EOS, and rescore."""
    c = session.c
    best = min(live, key=lambda h: (-h.covered(c), -h.score, h.tokens)) if live else session.root()
    tokens = list(best.tokens)
    met = list(best.met)
    if best.progress is not None:
        ci, cur = best.progress
        tokens += c.tokens[ci][cur:]
        met[ci] = True
    for ci, seq in enumerate(c.tokens):
        if not met[ci]:
            tokens += seq
            met[ci] = True
    tokens.append(EOS)
    if len(tokens) > session.model.cfg.max_len:
        raise ValueError("constraints do not fit within the model's max_len")
    score = session.rescore(tokens)
    return Hypothesis(tuple(tokens), score, True, met=tuple(met), flagged=True,
                      note="constraints force-appended")


def grid_beam_search(
    model: ConstrainedTransformer,
    x: Sequence[int],
    c: ConstraintSet,
    beam: int = 8,
    max_len: Optional[int] = None,
    word_final: Optional[Iterable[int]] = None,
) -> Hypothesis:
    """Grid beam search: one beam per (length, constraint tokens covered) cell.

    Each cell is scored by its own model call, so the work per step grows
    with the number of constraint tokens.  ``word_final`` restricts where a
    constraint may begin (see ``_place``).
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    word_final = None if word_final is None else frozenset(word_final)
    max_len = max_len or default_max_len(model, x)
    session = DecodeSession(model, x, c)
    total = c.n_tokens
    cells: dict[int, tuple[list[Hypothesis], DecoderState]] = {0: ([session.root()], session.root_state)}
    finished: list[Hypothesis] = []
    for t in range(1, max_len + 1):
        pending: dict[int, list] = {}
        stepped_states: dict[int, DecoderState] = {}
        for k, (hyps, state) in sorted(cells.items()):
            logp, stepped = session.step(state, hyps)
            stepped_states[k] = stepped
            gen = logp.copy()
            gen[[i for i, h in enumerate(hyps) if h.progress is not None], :] = NEG_INF
            if k < total:
                gen[:, EOS] = NEG_INF
            if t == max_len:
                gen = _only_eos(gen)
            for score, _, hi, tok in top_candidates(hyps, gen, beam):
                pending.setdefault(k, []).append((session.extend(hyps[hi], tok, score), k, hi))
            if k == total or t == max_len:
                continue
            for hi, h in enumerate(hyps):
                for tok in _constraint_tokens(c, h, word_final):
                    change = _place(c, h, tok, word_final)
                    score = h.score + float(logp[hi, tok])
                    if score == NEG_INF:
                        continue
                    nh = session.extend(h, tok, score, **change)
                    pending.setdefault(nh.covered(c), []).append((nh, k, hi))
        merged = DecoderState.concat([stepped_states[k] for k in sorted(stepped_states)])
        offsets, off = {}, 0
        for k in sorted(stepped_states):
            offsets[k] = off
            off += len(cells[k][0])
        cells = {}
        for k, cands in sorted(pending.items()):
            seen = {}
            for h, src_k, hi in cands:
                key = (h.tokens, h.met, h.progress)
                if key not in seen or h.score > seen[key][0].score:
                    seen[key] = (h, src_k, hi)
            ranked = sorted(seen.values(), key=lambda e: e[0].key())[:beam]
            keep = []
            for h, src_k, hi in ranked:
                if h.finished:
                    finished.append(h)
                else:
                    keep.append((h, offsets[src_k] + hi))
            if keep:
                cells[k] = ([h for h, _ in keep], merged.select([r for _, r in keep]))
        live_scores = [h.score for hyps, _ in cells.values() for h in hyps]
        if _done(finished, live_scores):
            break
    live = [h for hyps, _ in cells.values() for h in hyps]
    return _finish(finished, live, lambda: _force_complete(session, live))


def dba_search(
    model: ConstrainedTransformer,
    x: Sequence[int],
    c: ConstraintSet,
    beam: int = 8,
    max_len: Optional[int] = None,
    word_final: Optional[Iterable[int]] = None,
) -> Hypothesis:
    """Dynamic beam allocation: one beam of ``beam`` slots split into coverage banks.

    Candidates per step are the beam's global top-k, every constraint token
    each hypothesis could place next, and each hypothesis's own best token.
    Bank ``j`` (hypotheses covering ``j`` constraint tokens) gets
    ``beam // (C + 1)`` slots, the remainder going to the fully covered bank;
    slots a bank cannot fill are handed to the other banks, highest first.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    word_final = None if word_final is None else frozenset(word_final)
    max_len = max_len or default_max_len(model, x)
    session = DecodeSession(model, x, c)
    total = c.n_tokens
    live, state, finished = [session.root()], session.root_state, []
    for t in range(1, max_len + 1):
        logp, stepped = session.step(state, live)
        for i, h in enumerate(live):
            if h.progress is not None or h.covered(c) < total:
                logp[i, EOS] = NEG_INF
        if t == max_len:
            logp = _only_eos(logp)
        pairs = {(hi, tok) for _, _, hi, tok in top_candidates(live, logp, beam)}
        for hi, h in enumerate(live):
            row = logp[hi]
            if np.isfinite(row).any():
                pairs.add((hi, int(np.argmax(row))))
            if t < max_len:
                pairs.update((hi, tok) for tok in _constraint_tokens(c, h, word_final))
        banks: dict[int, list] = {}
        for hi, tok in pairs:
            h = live[hi]
            score = h.score + float(logp[hi, tok])
            if score == NEG_INF:
                continue
            change = _place(c, h, tok, word_final)
            if change is None and h.progress is not None:
                # leaving a constraint unfinished abandons it
                change = {"met": h.met, "progress": None}
                retry = _place(c, replace(h, progress=None), tok, word_final)
                change = retry or change
            nh = session.extend(h, tok, score, **(change or {}))
            banks.setdefault(nh.covered(c), []).append((nh, hi))
        for b in banks.values():
            b.sort(key=lambda e: e[0].key())
        alloc = {j: beam // (total + 1) for j in range(total + 1)}
        alloc[total] += beam - sum(alloc.values())
        chosen = {j: banks.get(j, [])[: alloc[j]] for j in alloc}
        spare = beam - sum(len(v) for v in chosen.values())
        for j in sorted(alloc, reverse=True):
            if spare <= 0:
                break
            extra = banks.get(j, [])[len(chosen[j]) : len(chosen[j]) + spare]
            chosen[j] += extra
            spare -= len(extra)
        picked = sorted((e for v in chosen.values() for e in v), key=lambda e: e[0].key())
        nxt, rows = [], []
        for h, hi in picked:
            if h.finished:
                finished.append(h)
            else:
                nxt.append(h)
                rows.append(hi)
        if not nxt or _done(finished, [h.score for h in nxt]):
            live = nxt or live
            break
        live, state = nxt, stepped.select(rows)
    return _finish(finished, live, lambda: _force_complete(session, live))


# ---------------------------------------------------------------------------
# Oracle


def exhaustive_oracle(
    model: ConstrainedTransformer,
    x: Sequence[int],
    c: Optional[ConstraintSet] = None,
    max_len: int = 4,
    cover: Optional[ConstraintSet] = None,
) -> Hypothesis:
    """Exact argmax over every EOS-terminated sequence of at most ``max_len`` tokens.

    ``c`` is fed to the model; ``cover``, when given, keeps only sequences
    containing each of its constraints contiguously.
    """
    allowed = [v for v in range(model.cfg.tgt_vocab) if v not in (PAD, BOS)]
    if len(allowed) ** max_len > ORACLE_LIMIT:
        raise ValueError(f"search space {len(allowed)}^{max_len} exceeds {ORACLE_LIMIT}")
    session = DecodeSession(model, x, c)
    live, state, complete = [session.root()], session.root_state, []
    for t in range(1, max_len + 1):
        logp, stepped = session.step(state, live)
        nxt, rows = [], []
        for hi, h in enumerate(live):
            for tok in allowed:
                nh = session.extend(h, tok, h.score + float(logp[hi, tok]))
                if tok == EOS:
                    complete.append(nh)
                elif t < max_len:
                    nxt.append(nh)
                    rows.append(hi)
        if not nxt:
            break
        live, state = nxt, stepped.select(rows)
    if cover is not None:
        complete = [h for h in complete if all(contains(h.tokens, seq) for seq in cover.tokens)]
    if not complete:
        raise ValueError("no sequence satisfies the coverage filter")
    return _best(complete)


def covers(tokens: Sequence[int], c: ConstraintSet) -> bool:
    return all(contains(tokens, seq) for seq in c.tokens)
