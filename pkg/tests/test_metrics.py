import numpy as np
import pytest

from sfnet.metrics import WerBreakdown, classification_error, corpus_wer, format_report, wer


def edit_distance_oracle(ref, hyp):
    """Independent full-DP Levenshtein distance."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def test_identical_sequences():
    b = wer([1, 2, 3], [1, 2, 3])
    assert b.wer == 0.0 and b.errors == 0


def test_sub_plus_deletion():
    b = wer([1, 2, 3, 4], [1, 9, 3])
    assert b.substitutions == 1 and b.deletions == 1 and b.insertions == 0
    assert b.wer == 0.5


def test_empty_hypothesis_all_deletions():
    b = wer([5, 6, 7], [])
    assert b.wer == 1.0 and b.deletions == 3


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        wer([], [1])


def test_wer_can_exceed_one():
    b = wer([1], [2, 3, 4, 5])
    assert b.wer > 1.0


def test_counts_match_distance_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = list(rng.integers(1, 6, size=rng.integers(1, 9)))
        hyp = list(rng.integers(1, 6, size=rng.integers(0, 9)))
        b = wer(ref, hyp)
        assert b.errors == edit_distance_oracle(ref, hyp)
        assert b.reference_length == len(ref)


def test_relabeling_invariance():
    rng = np.random.default_rng(1)
    mapping = {i: i + 100 for i in range(1, 6)}
    for _ in range(50):
        ref = list(rng.integers(1, 6, size=rng.integers(1, 7)))
        hyp = list(rng.integers(1, 6, size=rng.integers(0, 7)))
        a = wer(ref, hyp)
        b = wer([mapping[v] for v in ref], [mapping[v] for v in hyp])
        assert (a.substitutions, a.deletions, a.insertions) == \
            (b.substitutions, b.deletions, b.insertions)


def test_swap_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(50):
        ref = list(rng.integers(1, 5, size=rng.integers(1, 7)))
        hyp = list(rng.integers(1, 5, size=rng.integers(1, 7)))
        a = wer(ref, hyp)
        b = wer(hyp, ref)
        assert a.substitutions == b.substitutions
        assert a.deletions == b.insertions and a.insertions == b.deletions


def test_corpus_wer_single_pair():
    pair = ([1, 2, 3], [1, 2])
    assert corpus_wer([pair]) == wer(*pair).wer


def test_corpus_wer_pooled_arithmetic():
    # (S+D+I, ref) = (1, 4) and (0, 6) -> 1/10
    pairs = [([1, 2, 3, 4], [1, 2, 3, 9]), ([1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6])]
    assert corpus_wer(pairs) == pytest.approx(0.1)


def test_corpus_wer_matches_summed_oracle():
    rng = np.random.default_rng(3)
    pairs = []
    errors = 0
    total = 0
    for _ in range(30):
        ref = list(rng.integers(1, 6, size=rng.integers(1, 8)))
        hyp = list(rng.integers(1, 6, size=rng.integers(0, 8)))
        pairs.append((ref, hyp))
        errors += edit_distance_oracle(ref, hyp)
        total += len(ref)
    assert corpus_wer(pairs) == pytest.approx(errors / total)


def test_corpus_wer_empty_corpus():
    with pytest.raises(ValueError):
        corpus_wer([])


def test_classification_error_extremes():
    logits = np.eye(4)
    assert classification_error(logits, [0, 1, 2, 3]) == 0.0
    assert classification_error(logits, [1, 2, 3, 0]) == 1.0


def test_classification_error_counting():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(50, 6))
    labels = rng.integers(0, 6, size=50)
    want = np.mean(logits.argmax(axis=1) != labels)
    assert classification_error(logits, labels) == pytest.approx(want)


def test_report_format():
    entries = [("s1", WerBreakdown(1, 0, 0, 4)), ("s2", WerBreakdown(0, 0, 0, 6))]
    text = format_report(entries)
    lines = text.strip().split("\n")
    assert lines[0] == "s1\t0.250000\t1,0,0"
    assert lines[1] == "s2\t0.000000\t0,0,0"
    assert lines[2] == "corpus\t0.100000\t1/10"
