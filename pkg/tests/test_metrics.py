import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mad.errors import ContractError
from mad.metrics import bleu1, cer, levenshtein, metric_report, rouge1_f, self_bleu, tokenize_for_metrics

words = st.lists(st.sampled_from("a b c d e f".split()), min_size=1, max_size=8)


def test_tokenize():
    assert tokenize_for_metrics("The cat, sat.") == ["the", "cat", "sat"]
    assert tokenize_for_metrics("") == []
    assert tokenize_for_metrics("Don't  STOP") == ["don't", "stop"]
    assert tokenize_for_metrics("a\tb\nc") == ["a", "b", "c"]


class TestBleu:
    def test_perfect(self):
        refs = [["the", "cat"], ["a", "dog", "ran"]]
        assert bleu1(refs, refs) == 100.0

    def test_clipped(self):
        assert bleu1([["the", "the", "the"]], [["the", "cat"]]) == pytest.approx(100 / 3, abs=1e-9)

    def test_disjoint(self):
        assert bleu1([["x", "y"]], [["a", "b"]]) == 0.0

    def test_brevity_penalty(self):
        assert bleu1([["a"]], [["a", "b", "c"]]) == pytest.approx(100 * 2.718281828459045 ** (1 - 3))

    def test_empty_candidates(self):
        assert bleu1([[]], [["a"]]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            bleu1([["a"]], [["a"], ["b"]])

    @given(st.lists(st.tuples(words, words), min_size=1, max_size=5), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        a = bleu1([c for c, _ in pairs], [r for _, r in pairs])
        b = bleu1([c for c, _ in shuffled], [r for _, r in shuffled])
        assert a == pytest.approx(b, abs=1e-9)


class TestRouge:
    def test_identical(self):
        assert rouge1_f([["a", "b"]], [["a", "b"]]) == 100.0

    def test_hand(self):
        assert rouge1_f([["a", "b"]], [["a", "c", "d"]]) == pytest.approx(40.0, abs=1e-12)

    def test_empty_candidate(self):
        assert rouge1_f([[]], [["a"]]) == 0.0

    @given(words, words, st.sampled_from(["zz", "qq"]))
    def test_unseen_tokens_irrelevant_to_bleu_and_rouge_structure(self, c, r, _):
        assert 0.0 <= rouge1_f([c], [r]) <= 100.0
        assert 0.0 <= bleu1([c], [r]) <= 100.0


class TestCer:
    def test_identical(self):
        assert cer(["hello"], ["hello"]) == 0.0

    def test_hand(self):
        assert cer(["axc"], ["abc"]) == pytest.approx(100 / 3, abs=1e-12)

    def test_can_exceed_100(self):
        assert cer(["zzzzzz"], ["abc"]) > 100.0

    def test_case_insensitive(self):
        assert cer(["ABC"], ["abc"]) == 0.0

    def test_empty_reference_corpus(self):
        with pytest.raises(ContractError):
            cer([""], [""])

    @given(st.text("abc", max_size=7), st.text("abc", max_size=7), st.text("abc", max_size=7))
    def test_triangle(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)

    def test_levenshtein_oracle(self):
        def slow(a, b):
            if not a or not b:
                return len(a) + len(b)
            return min(slow(a[1:], b) + 1, slow(a, b[1:]) + 1, slow(a[1:], b[1:]) + (a[0] != b[0]))
        rnd = random.Random(0)
        for _ in range(50):
            a = "".join(rnd.choice("ab") for _ in range(rnd.randint(0, 6)))
            b = "".join(rnd.choice("ab") for _ in range(rnd.randint(0, 6)))
            assert levenshtein(a, b) == slow(a, b)


class TestSelfBleu:
    def test_identical(self):
        assert self_bleu([["a", "b"]] * 3) == 100.0

    def test_disjoint(self):
        assert self_bleu([["a"], ["b"], ["c"]]) == 0.0

    def test_needs_two(self):
        with pytest.raises(ContractError):
            self_bleu([["a"]])

    def test_naive_reimplementation(self):
        rnd = random.Random(3)
        cands = [[rnd.choice("abcdefg") for _ in range(rnd.randint(2, 6))] for _ in range(3)]
        scores = []
        for i, c in enumerate(cands):
            others = [w for j, o in enumerate(cands) if j != i for w in o]
            pool = Counter(others)
            matches = sum(min(n, pool[w]) for w, n in Counter(c).items())
            r = len(others) / 2
            bp = 1.0 if len(c) > r else 2.718281828459045 ** (1 - r / len(c))
            scores.append(matches / len(c) * bp)
        assert self_bleu(cands) == pytest.approx(100 * sum(scores) / 3, abs=1e-9)


def test_report():
    rep = metric_report(["the cat sat", "a dog"], ["the cat sat", "a dog"])
    assert (rep.bleu1_pct, rep.rouge1_f_pct, rep.cer_pct, rep.n_pairs) == (100.0, 100.0, 0.0, 2)
