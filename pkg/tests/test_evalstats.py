import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrprog.errors import ContractError, UndefinedMetricError
from cxrprog.evalstats import (
    ScoredSet, bootstrap_ci, delong_test, evaluate_models, format_table, midranks, paired_bootstrap_diff,
    read_scores, roc_auc, score_average, write_scores,
)


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of positive/negative pairs ordered correctly."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@st.composite
def scored_sets(draw, min_size=2, max_size=50):
    n = draw(st.integers(min_size, max_size))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda v: 0 < sum(v) < len(v)))
    # a coarse grid gives frequent ties and keeps exp/affine maps strictly increasing in floating point
    ks = draw(st.lists(st.integers(-40, 40), min_size=n, max_size=n))
    return ScoredSet(np.array(ks) / 8.0, labels)


def test_auc_examples():
    assert roc_auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert roc_auc(ScoredSet([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75
    assert roc_auc(ScoredSet([0.3] * 6, [0, 1, 0, 1, 1, 0])) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc(ScoredSet([0.1, 0.2], [1, 1]))


def test_midranks_average_ties():
    np.testing.assert_array_equal(midranks(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1.0, 3.5, 2.0])


@settings(max_examples=200)
@given(scored_sets())
def test_auc_matches_pairwise_oracle(data):
    assert abs(roc_auc(data) - pairwise_auc(data.scores, data.labels)) <= 1e-12


@settings(max_examples=100)
@given(scored_sets())
def test_auc_invariant_under_increasing_maps(data):
    base = roc_auc(data)
    assert roc_auc(ScoredSet(np.exp(data.scores), data.labels)) == base
    assert roc_auc(ScoredSet(3.0 * data.scores + 7.0, data.labels)) == base


@settings(max_examples=100)
@given(scored_sets())
def test_negated_scores_complement(data):
    _, first = np.unique(data.scores, return_index=True)
    if len(first) != len(data):
        return  # the identity is stated for tie-free scores
    assert roc_auc(data) + roc_auc(ScoredSet(-data.scores, data.labels)) == pytest.approx(1.0, abs=1e-12)


# -- bootstrap ---------------------------------------------------------------
def test_perfect_separation_gives_degenerate_ci():
    labels = np.repeat([0, 1], 100)
    assert bootstrap_ci(ScoredSet(labels + 0.1 * np.arange(200) / 200, labels), 200) == (1.0, 1.0)


def test_bootstrap_is_seeded():
    rng = np.random.default_rng(0)
    data = ScoredSet(rng.normal(size=80), rng.integers(0, 2, size=80))
    assert bootstrap_ci(data, 300, rng=np.random.default_rng(5)) == bootstrap_ci(data, 300, rng=np.random.default_rng(5))


def test_bootstrap_redraws_single_class_resamples():
    data = ScoredSet([0.2, 0.4, 0.9], [0, 0, 1])
    lo, hi = bootstrap_ci(data, 200, rng=np.random.default_rng(1))
    assert 0.0 <= lo <= roc_auc(data) <= hi <= 1.0


def test_patient_level_bootstrap_runs():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, size=60)
    data = ScoredSet(labels + rng.normal(size=60), labels)
    lo, hi = bootstrap_ci(data, 200, rng=rng, groups=[f"p{i // 3}" for i in range(60)])
    assert lo <= roc_auc(data) <= hi


# -- paired comparisons --------------------------------------------------------
def test_self_comparison():
    rng = np.random.default_rng(3)
    data = ScoredSet(rng.normal(size=50), rng.integers(0, 2, size=50))
    diff, p = paired_bootstrap_diff(data, data, 200, np.random.default_rng(0))
    assert diff == 0.0 and p == 1.0
    assert delong_test(data, data) == (0.0, 1.0)


def test_separating_model_beats_random_scores():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 2, size=200)
    a = ScoredSet(labels + 0.01 * rng.normal(size=200), labels)
    b = ScoredSet(rng.normal(size=200), labels)
    _, p = paired_bootstrap_diff(a, b, 500, rng)
    assert p < 0.05


def test_correlated_models_significant_despite_overlapping_cis():
    rng = np.random.default_rng(5)
    n = 400
    labels = rng.integers(0, 2, size=n)
    base = labels + 1.2 * rng.normal(size=n)
    a = ScoredSet(base, labels)
    # b: the same scores plus a little label-independent noise and one systematic flip
    shift = np.where(labels == 1, -0.35, 0.35) * (rng.random(n) < 0.5)
    b = ScoredSet(base + 0.05 * rng.normal(size=n) + shift, labels)
    ci_a = bootstrap_ci(a, 500, rng=np.random.default_rng(6))
    ci_b = bootstrap_ci(b, 500, rng=np.random.default_rng(7))
    assert ci_a[0] < ci_b[1] and ci_b[0] < ci_a[1]
    _, p = paired_bootstrap_diff(a, b, 1000, np.random.default_rng(8))
    assert p < 0.05


def test_misaligned_ids_rejected():
    a = ScoredSet([0.1, 0.9], [0, 1], ["x", "y"])
    b = ScoredSet([0.1, 0.9], [0, 1], ["y", "x"])
    with pytest.raises(ContractError):
        paired_bootstrap_diff(a, b, 10)
    with pytest.raises(ContractError):
        score_average([a, b])


def test_delong_degenerate_classes():
    a = ScoredSet([0.1, 0.2, 0.3], [0, 0, 1])
    with pytest.raises(UndefinedMetricError):
        delong_test(a, a)


def test_delong_matches_brute_force_placements():
    rng = np.random.default_rng(9)
    labels = np.repeat([0, 1], [12, 9])
    sa = rng.normal(size=21) + labels
    sb = rng.normal(size=21)
    z, _ = delong_test(ScoredSet(sa, labels), ScoredSet(sb, labels))

    def psi(x, y):
        return 1.0 if x > y else 0.5 if x == y else 0.0

    def placements(s):
        pos, neg = s[labels == 1], s[labels == 0]
        return (np.array([np.mean([psi(x, y) for y in neg]) for x in pos]),
                np.array([np.mean([psi(x, y) for x in pos]) for y in neg]))

    a10, a01 = placements(sa)
    b10, b01 = placements(sb)
    var = np.var(a10 - b10, ddof=1) / len(a10) + np.var(a01 - b01, ddof=1) / len(a01)
    diff = pairwise_auc(sa, labels) - pairwise_auc(sb, labels)
    assert z == pytest.approx(diff / np.sqrt(var), rel=1e-10)


# -- averaging and reports ---------------------------------------------------------
def test_score_average():
    a = ScoredSet([0.0, 1.0], [0, 1])
    np.testing.assert_array_equal(score_average([a, a]).scores, a.scores)
    np.testing.assert_array_equal(score_average([a, ScoredSet([1.0, 0.0], [0, 1])]).scores, [0.5, 0.5])


def test_average_can_beat_both_inputs():
    labels = np.array([0, 0, 1, 1])
    a = ScoredSet([0.0, 0.6, 0.5, 1.0], labels)
    b = ScoredSet([0.6, 0.0, 1.0, 0.5], labels)
    avg = score_average([a, b])
    assert roc_auc(avg) > max(roc_auc(a), roc_auc(b))


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    labels = rng.integers(0, 2, size=40)
    ids = [f"e{i:02d}" for i in range(40)]
    sets = {"m1": {"y": ScoredSet(labels + rng.normal(size=40), labels, ids)},
            "m2": {"y": ScoredSet(rng.normal(size=40), labels, ids)}}
    write_scores(tmp_path / "s.csv", sets["m1"])
    back = read_scores(tmp_path / "s.csv")["y"]
    assert back.example_ids == ids and np.array_equal(back.scores, sets["m1"]["y"].scores)
    report = evaluate_models(sets, n_iter=100, seed=1)
    r = report.result("m1", "y")
    assert r.ci[0] <= r.auc <= r.ci[1]
    assert 0.0 <= report.comparisons[0].p_bootstrap <= 1.0
    table = format_table(report)
    assert "m1" in table and "(" in table
