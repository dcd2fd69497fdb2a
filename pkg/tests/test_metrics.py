import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fes.metrics import RougeScore, average_rouge, lcs_length, qa_em_f1, rouge_l, rouge_n, token_f1

seqs = st.lists(st.integers(0, 5), max_size=8)


def test_rouge_hand_cases():
    s = rouge_n("the cat".split(), "the cat sat".split(), 1)
    assert s.precision == 1.0
    assert s.recall == pytest.approx(2 / 3, abs=1e-12)
    assert s.f1 == pytest.approx(0.8, abs=1e-9)
    s = rouge_l("a c d".split(), "a b c d".split())
    assert (s.precision, s.recall) == (1.0, 0.75)
    assert s.f1 == pytest.approx(0.8571428571, abs=1e-9)
    assert rouge_n([1, 2, 3], [1, 2, 3], 2).f1 == 1.0
    assert rouge_l([1, 2], [1, 2]).f1 == 1.0


def test_rouge_degenerate_inputs():
    assert rouge_n([1, 2], [3, 4], 1).f1 == 0.0
    assert rouge_n([], [1], 1).f1 == 0.0
    assert rouge_l([], [1, 2]).f1 == 0.0
    assert rouge_l([1], []).f1 == 0.0
    assert rouge_n([1], [1], 2).f1 == 0.0  # no bigrams on either side
    with pytest.raises(ValueError):
        rouge_n([1], [1], 0)


def test_rouge_clips_repeated_ngrams():
    s = rouge_n([7, 7, 7, 7], [7, 8], 1)
    assert s.precision == 0.25 and s.recall == 0.5


def test_qa_em_f1():
    names = ["john smith", "john doe", "mary"]
    assert qa_em_f1(0, 0, names) == (1, 1.0)
    em, f1 = qa_em_f1(0, 1, names)
    assert em == 0 and f1 == pytest.approx(0.5)
    assert qa_em_f1(2, 1, names) == (0, 0.0)


def brute_lcs(a, b):
    for n in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(b, n))
        if any(c in subs for c in itertools.combinations(a, n)):
            return n
    return 0


@given(seqs, seqs)
def test_lcs_matches_enumeration(a, b):
    assert lcs_length(a, b) == brute_lcs(a, b)


@given(seqs, seqs, st.sampled_from([1, 2, "L"]))
def test_swapping_arguments_exchanges_precision_and_recall(h, r, kind):
    f = (lambda x, y: rouge_l(x, y)) if kind == "L" else (lambda x, y: rouge_n(x, y, kind))
    a, b = f(h, r), f(r, h)
    assert a.precision == pytest.approx(b.recall)
    assert a.recall == pytest.approx(b.precision)
    assert a.f1 == pytest.approx(b.f1)


@given(seqs, seqs)
def test_f1_is_harmonic_mean(h, r):
    for s in (rouge_n(h, r, 1), rouge_n(h, r, 2), rouge_l(h, r)):
        assert 0 <= s.f1 <= 1
        if s.precision + s.recall > 0:
            assert s.f1 == pytest.approx(2 * s.precision * s.recall / (s.precision + s.recall))
        else:
            assert s.f1 == 0


@given(st.integers(0, 9), st.integers(0, 9))
def test_unigram_on_single_tokens_is_exact_match(a, b):
    assert rouge_n([a], [b], 1).f1 == float(a == b)


def test_order_matters_for_rouge_l_only():
    assert rouge_n([1, 2, 3], [3, 2, 1], 1).f1 == 1.0
    assert rouge_l([1, 2, 3], [3, 2, 1]).f1 < 1.0


def test_average_rouge_and_token_f1():
    out = average_rouge([[1, 2], [3]], [[1, 2], [4]])
    assert out == {"rouge1": 0.5, "rouge2": 0.5, "rougeL": 0.5}
    with pytest.raises(ValueError):
        average_rouge([], [])
    assert token_f1(["a", "b"], ["b", "c"]) == 0.5
    assert RougeScore.from_counts(0, 0, 0).f1 == 0.0
