import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from cmnt import constraints as cg
from cmnt.corpus import DataError


def table_of(entries):
    return cg.AlignmentTable({s: dict(row) for s, row in entries.items()})


class TestRarity:
    def test_hand_sorted(self):
        freq = cg.FrequencyTable({"the": 1000, "cat": 50, "xylophone": 1, "sat": 40})
        assert cg.extract_perfect_constraints("the cat xylophone sat".split(), freq, 2) == ["xylophone", "sat"]

    def test_saturates(self):
        freq = cg.FrequencyTable({"a": 1, "b": 2})
        assert cg.extract_perfect_constraints(["b", "a"], freq, 5) == ["b", "a"]

    def test_zero_k(self):
        assert cg.extract_perfect_constraints(["a"], cg.FrequencyTable({"a": 1}), 0) == []

    def test_punctuation_and_duplicates(self):
        freq = cg.FrequencyTable({",": 1, "a": 5, "b": 3, "...": 1})
        assert cg.extract_perfect_constraints(["a", ",", "b", "a", "..."], freq, 5) == ["a", "b"]

    def test_ties_prefer_earlier_position(self):
        freq = cg.FrequencyTable({"x": 2, "y": 2, "z": 2})
        assert cg.extract_perfect_constraints(["z", "y", "x"], freq, 2) == ["z", "y"]

    @given(st.lists(st.sampled_from("abcdefg,."), max_size=12), st.integers(1, 6))
    def test_subset_of_reference(self, words, k):
        freq = cg.FrequencyTable.from_corpus([words, list("abc")])
        out = cg.extract_perfect_constraints(words, freq, k)
        assert set(out) <= set(words) and len(out) == len(set(out)) <= k


class TestAlignmentTable:
    def test_copy_corpus(self):
        table = cg.build_alignment_table([("a a".split(), "a a".split())])
        assert table.entries["a"] == {"a": 1.0}

    def test_asymmetric_bijection(self):
        # 'a' co-occurs with A alone in the second pair, which breaks the tie for 'b'
        pairs = [("a b".split(), "A B".split()), (["a"], ["A"])]
        table = cg.build_alignment_table(pairs, em_iterations=3, prune_threshold=0.0)
        assert table.best("a") == "A" and table.best("b") == "B"

    def test_symmetric_pair_is_a_tie(self):
        pairs = [("a b".split(), "A B".split()), ("b a".split(), "B A".split())]
        probs = cg.ibm1_probabilities(pairs, 5)
        assert probs["a"]["A"] == probs["a"]["B"]

    def test_rows_normalised_before_pruning(self):
        rng = random.Random(0)
        pairs = [([rng.choice("abcd") for _ in range(3)], [rng.choice("ABCD") for _ in range(3)]) for _ in range(20)]
        for row in cg.ibm1_probabilities(pairs, 5).values():
            assert abs(sum(row.values()) - 1.0) < 1e-6

    def test_pruned_rows_renormalised(self):
        rng = random.Random(1)
        pairs = [([rng.choice("abcd") for _ in range(3)], [rng.choice("ABCD") for _ in range(3)]) for _ in range(20)]
        table = cg.build_alignment_table(pairs, prune_threshold=0.2)
        for row in table.entries.values():
            assert abs(sum(row.values()) - 1.0) < 1e-9 and all(p > 0.2 for p in row.values())

    def test_errors(self):
        with pytest.raises(DataError):
            cg.build_alignment_table([])
        with pytest.raises(ValueError):
            cg.build_alignment_table([(["a"], ["A"])], em_iterations=0)

    def test_file_round_trip(self, tmp_path):
        table = table_of({"b": {"X": 0.25, "Y": 0.75}, "a": {"Z": 1.0}})
        table.save(tmp_path / "t.tsv")
        lines = (tmp_path / "t.tsv").read_text().splitlines()
        assert [line.split("\t")[:2] for line in lines] == [["a", "Z"], ["b", "Y"], ["b", "X"]]
        assert cg.AlignmentTable.load(tmp_path / "t.tsv").entries == table.entries

    def test_malformed_file(self, tmp_path):
        (tmp_path / "t.tsv").write_text("a\tb\n")
        with pytest.raises(DataError):
            cg.AlignmentTable.load(tmp_path / "t.tsv")


class TestReplacingCandidates:
    def test_pair(self):
        assert cg.replacing_candidates("A", table_of({"a": {"A": 0.6, "B": 0.4}})) == {"B"}

    def test_absent(self):
        assert cg.replacing_candidates("Q", table_of({"a": {"A": 1.0}})) == set()

    def test_three_way(self):
        table = table_of({"a": {"A": 0.5, "B": 0.3, "C": 0.2}})
        assert cg.replacing_candidates("A", table) == {"B", "C"}

    @given(st.dictionaries(st.sampled_from("abcd"), st.sets(st.sampled_from("ABCDE"), min_size=1), min_size=1))
    def test_symmetric(self, raw):
        table = table_of({s: {t: 1.0 / len(ts) for t in ts} for s, ts in raw.items()})
        for y in "ABCDE":
            for z in cg.replacing_candidates(y, table):
                assert y in cg.replacing_candidates(z, table)


NOISE_TABLE = table_of({"a": {"A": 0.5, "B": 0.3, "C": 0.2}, "d": {"D": 0.7, "E": 0.3}})
REF = ["A", "D", "F", "G", "H"]
CONS = ["A", "D", "F", "G", "H"]
FALLBACK = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"]


class TestNoise:
    def test_p_zero_is_identity(self):
        out, pos = cg.inject_noise(CONS, REF, NOISE_TABLE, 0.0, seed=3, fallback=FALLBACK)
        assert out == CONS and pos == []

    def test_p_one_avoids_reference(self):
        for seed in range(20):
            out, pos = cg.inject_noise(CONS, REF, NOISE_TABLE, 1.0, seed, FALLBACK)
            assert pos == [0, 1, 2, 3, 4] and not set(out) & set(REF)

    def test_prefers_replacing_words(self):
        out, _ = cg.inject_noise(["A"], ["A"], NOISE_TABLE, 1.0, 0, FALLBACK)
        assert out[0] in {"B", "C"}

    def test_empirical_rate(self):
        replaced = sum(len(cg.inject_noise(["A"], REF, NOISE_TABLE, 0.6, seed, FALLBACK)[1]) for seed in range(10_000))
        assert 0.59 <= replaced / 10_000 <= 0.61

    def test_deterministic(self):
        a = cg.inject_noise(CONS, REF, NOISE_TABLE, 0.5, 11, FALLBACK)
        assert a == cg.inject_noise(CONS, REF, NOISE_TABLE, 0.5, 11, FALLBACK)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            cg.inject_noise(CONS, REF, NOISE_TABLE, 1.5, 0)

    def test_no_replacement_possible(self):
        with pytest.raises(DataError):
            cg.inject_noise(["A"], ["A", "B", "C"], NOISE_TABLE, 1.0, 0, fallback=["A", "B", "C"])

    def test_fixed_count_all(self):
        out, pos = cg.fixed_noise_count(CONS, REF, NOISE_TABLE, 5, 0, FALLBACK)
        assert pos == [0, 1, 2, 3, 4] and not set(out) & set(REF)

    def test_fixed_count_one(self):
        out, pos = cg.fixed_noise_count(CONS, REF, NOISE_TABLE, 1, 0, FALLBACK)
        assert len(pos) == 1 and sum(w in REF for w in out) == 4

    def test_fixed_count_nested(self):
        prev = set()
        for n in range(6):
            out, pos = cg.fixed_noise_count(CONS, REF, NOISE_TABLE, n, 42, FALLBACK)
            assert prev <= set(pos) and len(pos) == n
            prev = set(pos)

    def test_fixed_count_needs_five(self):
        with pytest.raises(ValueError):
            cg.fixed_noise_count(CONS[:4], REF, NOISE_TABLE, 1, 0, FALLBACK)
        out, pos = cg.fixed_noise_count(CONS[:4], REF, NOISE_TABLE, 1, 0, FALLBACK, size=None)
        assert len(pos) == 1

    def test_positions_uniform(self):
        counts = Counter(cg.fixed_noise_count(CONS, REF, NOISE_TABLE, 1, seed, FALLBACK)[1][0]
                         for seed in range(100_000))
        assert chisquare([counts[i] for i in range(5)]).pvalue > 0.01

    @settings(max_examples=50)
    @given(st.integers(0, 10**6), st.floats(0, 1))
    def test_noise_never_in_reference(self, seed, p):
        out, pos = cg.inject_noise(CONS, REF, NOISE_TABLE, p, seed, FALLBACK)
        for i in pos:
            assert out[i] not in REF


class TestAutoConstraints:
    def test_bijective_table(self):
        table = table_of({"x": {"X": 1.0}, "y": {"Y": 1.0}, "z": {"Z": 1.0}})
        freq = cg.FrequencyTable({"x": 9, "y": 1, "z": 4})
        assert cg.auto_constraints(["x", "y", "z"], freq, table, 2) == ["Y", "Z"]

    def test_full_count_when_all_known(self):
        table = table_of({w: {w.upper(): 1.0} for w in "abcdef"})
        assert len(cg.auto_constraints(list("abcdef"), cg.FrequencyTable(), table, 5)) == 5

    def test_no_hits(self):
        assert cg.auto_constraints(["q", "r"], cg.FrequencyTable(), table_of({"a": {"A": 1.0}}), 5) == []

    def test_noisy_rate(self):
        assert cg.noisy_rate([["A", "Q"], ["B"]], [["A"], ["B", "C"]]) == pytest.approx(1 / 3)
        assert cg.noisy_rate([[]], [["A"]]) == 0.0
