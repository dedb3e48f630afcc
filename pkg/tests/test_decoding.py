import itertools
import math
import random

import numpy as np
import pytest
import torch

from cmnt.decoding import (
    DecodeSession, Hypothesis, beam_search, covers, dba_search, exhaustive_oracle, grid_beam_search,
    top_candidates,
)
from cmnt.memory import ConstraintSet
from cmnt.model import EOS, VARIANTS

from conftest import perturb_all, tiny_model


def oracle_model(variant=("none", "none"), vocab=6, seed=0):
    # vocab 6: PAD, BOS, EOS, UNK + two content tokens -> four emittable tokens
    return perturb_all(tiny_model(*variant, vocab=vocab, seed=seed), seed=seed, scale=1.0)


def brute_force(model, x, c, max_len, cover=None):
    """Independent enumeration: every sequence scored by a fresh teacher-forced pass."""
    allowed = [v for v in range(model.cfg.tgt_vocab) if v not in (0, 1)]
    best = None
    for n in range(max_len):
        for body in itertools.product([v for v in allowed if v != EOS], repeat=n):
            seq = list(body) + [EOS]
            if cover is not None and not covers(seq, cover):
                continue
            score = DecodeSession(model, x, c).rescore(seq)
            key = (-score, tuple(seq))
            if best is None or key < best[0]:
                best = (key, seq, score)
    return best[1], best[2]


class TestScoring:
    def test_rescore_equals_sum_of_steps(self):
        model = oracle_model()
        session = DecodeSession(model, [4, 5], ConstraintSet())
        seq = [4, 3, EOS]
        logp = model([[4, 5]], [[1] + seq[:-1]])[0]
        expected = sum(logp[i, t].item() for i, t in enumerate(seq))
        assert abs(session.rescore(seq) - expected) < 1e-10

    def test_top_candidates_tie_break(self):
        hyps = [Hypothesis((5,), 0.0), Hypothesis((4,), 0.0)]
        logp = np.full((2, 3), -1.0)
        cands = top_candidates(hyps, logp, 2)
        assert [c[1] for c in cands] == [(4, 0), (4, 1)]

    def test_top_candidates_skips_impossible(self):
        logp = np.array([[-np.inf, -1.0, -np.inf]])
        assert [c[3] for c in top_candidates([Hypothesis((), 0.0)], logp, 3)] == [1]


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(5))
    def test_saturated_width_matches_brute_force(self, seed):
        model = oracle_model(seed=seed)
        x = [4, 5]
        h = beam_search(model, x, beam=4**3, max_len=3)
        seq, score = brute_force(model, x, ConstraintSet(), 3)
        assert list(h.tokens) == seq and abs(h.score - score) < 1e-9

    def test_result_ends_with_eos(self):
        h = beam_search(oracle_model(), [4], beam=2, max_len=5)
        assert h.finished and h.tokens[-1] == EOS

    def test_width_one_is_greedy(self):
        model = oracle_model()
        session = DecodeSession(model, [4, 5])
        state, hyp, out = session.root_state, session.root(), []
        for t in range(4):
            logp, state = session.step(state, [hyp])
            if t == 3:
                tok = EOS
            else:
                tok = int(np.argmax(logp[0]))
            hyp = session.extend(hyp, tok, hyp.score + logp[0, tok])
            out.append(tok)
            if tok == EOS:
                break
        assert list(beam_search(model, [4, 5], beam=1, max_len=4).tokens) == out

    def test_soft_decoding_does_not_force_constraints(self):
        model = oracle_model(("shallow", "attn"))
        c = ConstraintSet.from_tokens([[5]])
        h = beam_search(model, [4], c, beam=4**3, max_len=3)
        oracle = exhaustive_oracle(model, [4], c, 3)
        assert h.tokens == oracle.tokens

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            beam_search(oracle_model(), [4], beam=0)


class TestOracle:
    def test_matches_brute_force(self):
        model = oracle_model(("deep", "copy"))
        c = ConstraintSet.from_tokens([[3]])
        h = exhaustive_oracle(model, [4, 5], c, 3)
        seq, score = brute_force(model, [4, 5], c, 3)
        assert list(h.tokens) == seq and abs(h.score - score) < 1e-9

    def test_coverage_filter(self):
        model = oracle_model()
        c = ConstraintSet.from_tokens([[5]])
        assert 5 in exhaustive_oracle(model, [4], None, 3, cover=c).tokens

    def test_search_space_limit(self):
        with pytest.raises(ValueError, match="exceeds"):
            exhaustive_oracle(tiny_model(vocab=40), [4], None, max_len=5)


class TestGridBeamSearch:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_coverage_filtered_brute_force(self, seed):
        model = oracle_model(seed=seed)
        c = ConstraintSet.from_tokens([[5]])
        h = grid_beam_search(model, [4], c, beam=4**3, max_len=3)
        seq, score = brute_force(model, [4], ConstraintSet(), 3, cover=c)
        assert list(h.tokens) == seq and abs(h.score - score) < 1e-9

    def test_multi_subword_constraint_kept_contiguous(self):
        model = oracle_model(vocab=8)
        c = ConstraintSet.from_tokens([[6, 5], [7]])
        for beam in (1, 2, 8):
            h = grid_beam_search(model, [4, 5], c, beam=beam, max_len=6)
            assert covers(h.tokens, c)

    def test_unreachable_constraints_force_appended(self):
        model = oracle_model(vocab=8)
        c = ConstraintSet.from_tokens([[5, 6], [7]])
        h = grid_beam_search(model, [4], c, beam=2, max_len=2)
        assert h.flagged and covers(h.tokens, c) and h.tokens[-1] == EOS
        assert abs(h.score - DecodeSession(model, [4], c).rescore(h.tokens)) < 1e-10

    def test_empty_constraints_equal_beam_search(self):
        model = oracle_model()
        a = grid_beam_search(model, [4, 5], ConstraintSet(), beam=3, max_len=4)
        b = beam_search(model, [4, 5], beam=3, max_len=4)
        assert a.tokens == b.tokens


def starts_at_word_boundary(tokens, seq, word_final):
    for i in range(len(tokens) - len(seq) + 1):
        if tuple(tokens[i : i + len(seq)]) == tuple(seq) and (i == 0 or tokens[i - 1] in word_final):
            return True
    return False


@pytest.mark.parametrize("search", [grid_beam_search, dba_search])
@pytest.mark.parametrize("seed", range(6))
def test_constraints_start_at_word_boundaries(search, seed):
    model = oracle_model(vocab=9, seed=seed)
    word_final = {3, 6, 8}
    c = ConstraintSet.from_tokens([[5, 6], [8]])
    h = search(model, [4, 5], c, beam=3, max_len=8, word_final=word_final)
    assert not h.flagged
    assert all(starts_at_word_boundary(h.tokens, seq, word_final) for seq in c.tokens)


class TestDba:
    @pytest.mark.parametrize("seed", range(4))
    def test_covers_constraints(self, seed):
        rng = random.Random(seed)
        model = oracle_model(("shallow", "gate"), vocab=9, seed=seed)
        toks = rng.sample(range(3, 9), 3)
        c = ConstraintSet.from_tokens([[toks[0], toks[1]], [toks[2]]])
        for beam in (1, 3, 6):
            assert covers(dba_search(model, [4, 5], c, beam=beam, max_len=6).tokens, c)

    def test_wide_beam_reaches_constrained_optimum(self):
        model = oracle_model(vocab=8)
        c = ConstraintSet.from_tokens([[6]])
        h = dba_search(model, [4], c, beam=64, max_len=3)
        oracle = exhaustive_oracle(model, [4], None, 3, cover=c)
        assert abs(h.score - oracle.score) < 1e-9

    def test_flagged_fallback(self):
        model = oracle_model(vocab=8)
        c = ConstraintSet.from_tokens([[5, 6, 7]])
        h = dba_search(model, [4], c, beam=2, max_len=2)
        assert h.flagged and covers(h.tokens, c)


@pytest.mark.parametrize("variant", VARIANTS)
def test_memory_variants_decode_deterministically(variant):
    model = oracle_model(variant, vocab=8)
    c = ConstraintSet.from_tokens([[5], [6, 7]])
    runs = [(beam_search(model, [4, 5], c, beam=3).tokens, grid_beam_search(model, [4, 5], c, beam=3).tokens,
             dba_search(model, [4, 5], c, beam=3).tokens) for _ in range(2)]
    assert runs[0] == runs[1]


def test_decoding_leaves_model_untouched():
    model = oracle_model(("deep", "attn"))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    grid_beam_search(model, [4], ConstraintSet.from_tokens([[5]]), beam=2)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert math.isfinite(beam_search(model, [4], beam=2).score)
