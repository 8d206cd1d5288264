# test_metrics.py
import itertools

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from metrics import (
    BootstrapResult,
    MetricReport,
    MetricsError,
    PredictionSet,
    auc_from_arrays,
    bootstrap,
    compare_methods,
    evaluate,
    load_predictions,
    percentile_ci,
    roc_auc,
    save_predictions,
    signed_rank_test,
    threshold_metrics,
    wilcoxon_signed_rank,
)


def _pairwise_auc(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _brute_force_p(d):
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    abs_d = np.abs(d)
    # average ranks without scipy
    ranks = np.array([np.sum(abs_d < v) + (np.sum(abs_d == v) + 1) / 2.0 for v in abs_d])
    total = ranks.sum()
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = ranks[np.array(signs, dtype=bool)].sum()
        hits += abs(w - total / 2) >= abs(observed - total / 2) - 1e-9
    return hits / 2 ** len(d)


def _separable(n_pos=10, n_neg=10) -> PredictionSet:
    labels = [1] * n_pos + [0] * n_neg
    scores = [0.9] * n_pos + [0.1] * n_neg
    return PredictionSet.from_arrays([f"c{i:02d}" for i in range(len(labels))], labels, scores)


def _random_set(n=40, seed=0) -> PredictionSet:
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    scores = np.clip(0.5 + 0.2 * (labels - 0.5) + rng.normal(scale=0.2, size=n), 0, 1)
    return PredictionSet.from_arrays([f"c{i:03d}" for i in range(n)], labels, scores)


# ----------------------------
# Prediction sets
# ----------------------------
def test_prediction_set_sorts_by_id():
    preds = PredictionSet.from_arrays(["b", "a"], [0, 1], [0.2, 0.8])
    assert preds.ids == ("a", "b")
    assert preds.labels.tolist() == [1, 0]
    assert preds.n_positive == 1 and preds.n_negative == 1


@pytest.mark.parametrize(
    "ids,labels,scores",
    [(["a", "a"], [0, 1], [0.1, 0.2]), (["a", "b"], [0, 2], [0.1, 0.2]), (["a", "b"], [0, 1], [0.1, 1.2]),
     (["a", "b"], [0, 1], [0.1, float("nan")]), (["a"], [0, 1], [0.1, 0.2])],
)
def test_prediction_set_validation(ids, labels, scores):
    with pytest.raises(MetricsError):
        PredictionSet.from_arrays(ids, labels, scores)


def test_prediction_file_round_trip(tmp_path):
    preds = _random_set()
    path = save_predictions(preds, tmp_path / "predictions.csv")
    assert path.read_text().splitlines()[0] == "id,label,score"
    loaded = load_predictions(path)
    assert loaded.ids == preds.ids
    np.testing.assert_allclose(loaded.scores, preds.scores, rtol=0, atol=1e-15)


# ----------------------------
# AUC
# ----------------------------
@pytest.mark.parametrize(
    "scores,expected",
    [([0.9, 0.8, 0.2, 0.1], 1.0), ([0.5, 0.5, 0.5, 0.5], 0.5), ([0.9, 0.3, 0.5, 0.1], 0.75)],
)
def test_auc_examples(scores, expected):
    assert auc_from_arrays(np.array([1, 1, 0, 0]), np.array(scores)) == expected


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
        assert auc_from_arrays(labels, scores) == pytest.approx(_pairwise_auc(labels, scores), abs=1e-12)


def test_auc_invariant_under_monotone_transform_and_flips():
    preds = _random_set(seed=3)
    auc = auc_from_arrays(preds.labels, preds.scores)
    assert auc_from_arrays(preds.labels, preds.scores ** 3) == pytest.approx(auc, abs=1e-12)
    assert auc + auc_from_arrays(preds.labels, 1.0 - preds.scores) == pytest.approx(1.0, abs=1e-12)


def test_auc_agrees_with_sklearn():
    preds = _random_set(n=57, seed=4)
    assert auc_from_arrays(preds.labels, preds.scores) == pytest.approx(roc_auc_score(preds.labels, preds.scores))


def test_auc_needs_both_classes():
    with pytest.raises(MetricsError):
        auc_from_arrays(np.array([1, 1]), np.array([0.2, 0.3]))


# ----------------------------
# Threshold metrics
# ----------------------------
def test_confusion_matrix_example():
    # TP 3, FN 1, FP 1, TN 5
    labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    scores = [0.9, 0.8, 0.5, 0.2, 0.7, 0.1, 0.1, 0.3, 0.2, 0.4]
    out = threshold_metrics(PredictionSet.from_arrays([str(i) for i in range(10)], labels, scores))
    assert out == pytest.approx({"accuracy": 0.8, "precision": 0.75, "recall": 0.75, "f1": 0.75})


def test_no_predicted_positives_give_zero_precision():
    preds = PredictionSet.from_arrays(["a", "b", "c"], [1, 0, 0], [0.1, 0.2, 0.3])
    out = threshold_metrics(preds)
    assert out["precision"] == 0.0 and out["recall"] == 0.0 and out["f1"] == 0.0
    assert out["accuracy"] == pytest.approx(2 / 3)


# ----------------------------
# Bootstrap
# ----------------------------
def test_percentile_ci_of_one_to_hundred():
    lo, hi = percentile_ci(np.arange(1, 101))
    assert lo == pytest.approx(3.475) and hi == pytest.approx(97.525)


def test_bootstrap_same_seed_same_replicates():
    a = bootstrap(_random_set(), n=50, seed=11)
    b = bootstrap(_random_set(), n=50, rng=np.random.default_rng(11))
    for name in a:
        np.testing.assert_array_equal(a[name].replicates, b[name].replicates)


def test_bootstrap_of_perfect_classifier_is_constant():
    results = bootstrap(_separable(), n=30, seed=0)
    for name in ("auc", "accuracy", "precision", "recall", "f1"):
        r = results[name]
        assert (r.point, r.ci_lo, r.ci_hi) == (1.0, 1.0, 1.0)


def test_report_carries_the_percentile_band():
    preds = _random_set(seed=2)
    results = bootstrap(preds, n=100, seed=5)
    report = evaluate(preds, n=100, seed=5)
    for row in report.rows():
        r = results[row["metric"]]
        assert (row["point"], row["ci_lo"], row["ci_hi"]) == (r.point, r.ci_lo, r.ci_hi)
    assert report.auc.ci_lo <= roc_auc(preds) <= report.auc.ci_hi
    assert report.n_replicates == 100


def test_report_keeps_a_band_that_excludes_the_mean():
    skewed = BootstrapResult("auc", np.array([0.5, 0.5, 1.0]), point=0.9, ci_lo=0.5, ci_hi=0.85)
    report = MetricReport.from_bootstrap({name: skewed for name in ("auc", "accuracy", "precision", "recall", "f1")})
    assert report.to_dict()["auc"] == {"point": 0.9, "ci_lo": 0.5, "ci_hi": 0.85}


@pytest.mark.slow
def test_band_brackets_the_full_set_auc_in_most_trials():
    trials = 200
    hits = 0
    for trial in range(trials):
        preds = _random_set(n=200, seed=trial)
        auc = bootstrap(preds, n=200, seed=trial)["auc"]
        hits += auc.ci_lo <= roc_auc(preds) <= auc.ci_hi
    assert hits >= 0.95 * trials


def test_bootstrap_rejects_degenerate_inputs():
    with pytest.raises(MetricsError):
        bootstrap(_random_set(), n=1, seed=0)
    with pytest.raises(MetricsError, match="both classes"):
        bootstrap(PredictionSet.from_arrays(["a", "b"], [1, 1], [0.2, 0.4]), n=10, seed=0)
    with pytest.raises(MetricsError, match="rng or a seed"):
        bootstrap(_random_set(), n=10)


def test_bootstrap_redraws_single_class_resamples():
    preds = PredictionSet.from_arrays(["a", "b", "c"], [1, 0, 0], [0.9, 0.2, 0.1])
    results = bootstrap(preds, n=200, seed=0)
    # P(no positive in a 3-draw resample) = 8/27, so redraws are all but certain
    assert results["auc"].redraws > 0
    assert len(results["auc"].replicates) == 200


# ----------------------------
# Wilcoxon
# ----------------------------
def test_identical_samples_give_p_one():
    result = signed_rank_test([0.7, 0.8, 0.9], [0.7, 0.8, 0.9])
    assert result.p_value == 1.0 and result.method == "degenerate"


def test_five_positive_differences():
    assert wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1]) == pytest.approx(0.0625)


def test_exact_matches_brute_force():
    rng = np.random.default_rng(0)
    for m in range(1, 13):
        d = np.round(rng.normal(size=m), 1)  # rounded so ties and zeros show up
        if not d.any():
            continue
        p = wilcoxon_signed_rank(d, np.zeros(m))
        assert p == pytest.approx(_brute_force_p(d), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_normal_approximation_close_to_exact_at_25(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(loc=0.3, size=25)
    exact = signed_rank_test(d, np.zeros(25))
    normal = signed_rank_test(d, np.zeros(25), exact_max=0)
    assert exact.method == "exact" and normal.method == "normal"
    assert normal.p_value == pytest.approx(exact.p_value, abs=0.02)


def test_pratt_keeps_zeros_in_the_ranking():
    d = [0.0, 1.0, 2.0, -3.0]
    assert signed_rank_test(d, [0.0] * 4).statistic == 3.0
    assert signed_rank_test(d, [0.0] * 4, zero_method="pratt").statistic == 5.0
    with pytest.raises(MetricsError):
        signed_rank_test(d, [0.0] * 4, zero_method="zsplit")


def test_wilcoxon_rejects_unpaired_input():
    with pytest.raises(MetricsError):
        signed_rank_test([1.0, 2.0], [1.0])


# ----------------------------
# Paired comparison
# ----------------------------
def test_compare_identical_methods():
    preds = _random_set()
    report = compare_methods(preds, preds, n=50, seed=0)
    assert report.p_value == 1.0 and not report.significant


def test_compare_perfect_against_reversed():
    good = _random_set(seed=1)
    ranks = np.argsort(np.argsort(good.labels + 0.01 * np.arange(len(good))))
    perfect = PredictionSet.from_arrays(good.ids, good.labels, ranks / len(good))
    reversed_ = PredictionSet.from_arrays(good.ids, good.labels, 1.0 - ranks / len(good))
    report = compare_methods(perfect, reversed_, n=100, seed=0)
    assert report.auc_a.point == 1.0 and report.auc_b.point == 0.0
    assert report.p_value < 0.05 and report.significant


def test_compare_applies_each_resample_to_both_methods():
    preds = _random_set()
    calls = []

    def recording(labels, scores):
        calls.append(scores.copy())
        return float(scores.mean())

    compare_methods(preds, preds, n=20, seed=3, metric=recording)
    assert len(calls) == 40
    for a, b in zip(calls[0::2], calls[1::2]):
        np.testing.assert_array_equal(a, b)


def test_compare_needs_matching_cases():
    a = _random_set()
    b = PredictionSet.from_arrays([f"x{i}" for i in range(len(a))], a.labels, a.scores)
    with pytest.raises(MetricsError, match="different cases"):
        compare_methods(a, b, n=10, seed=0)
