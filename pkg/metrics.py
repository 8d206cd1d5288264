# metrics.py
"""
Binary classification metrics, percentile bootstrap CIs and the paired
Wilcoxon signed-rank comparison between two methods.

All functions are pure given (inputs, rng): bootstrap index sets are drawn
serially from the generator before any metric is evaluated.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score

from config import VoxmimError
from volume import percentile

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auc", "accuracy", "precision", "recall", "f1")
MAX_REDRAWS = 1000
EXACT_MAX_NONZERO = 25
SIGNIFICANCE_LEVEL = 0.05

MetricFn = Callable[[np.ndarray, np.ndarray], float]


class MetricsError(VoxmimError, ValueError):
    """Invalid prediction set or statistical test input."""


# ----------------------------
# Types
# ----------------------------
@dataclass(frozen=True)
class PredictionSet:
    """Per-case (id, label, score), held sorted by id."""

    ids: Tuple[str, ...]
    labels: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_arrays(cls, ids: Sequence[str], labels: Sequence[int], scores: Sequence[float]) -> "PredictionSet":
        ids = [str(i) for i in ids]
        labels = np.asarray(labels)
        scores = np.asarray(scores, dtype=np.float64)
        if not (len(ids) == labels.shape[0] == scores.shape[0]):
            raise MetricsError(f"Length mismatch: {len(ids)} ids, {labels.shape[0]} labels, {scores.shape[0]} scores")
        if len(set(ids)) != len(ids):
            raise MetricsError("Prediction ids must be unique")
        if not np.isin(labels, (0, 1)).all():
            raise MetricsError("Labels must be 0 or 1")
        if not np.isfinite(scores).all():
            raise MetricsError(f"Non-finite score for case '{ids[int(np.flatnonzero(~np.isfinite(scores))[0])]}'")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise MetricsError("Scores must lie in [0, 1]")
        order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
        return cls(
            ids=tuple(ids[i] for i in order),
            labels=labels[order].astype(np.int64),
            scores=scores[order],
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive


@dataclass(frozen=True)
class BootstrapResult:
    metric: str
    replicates: np.ndarray
    point: float
    ci_lo: float
    ci_hi: float
    seed: Optional[int] = None
    redraws: int = 0


@dataclass(frozen=True)
class MetricValue:
    point: float
    ci_lo: Optional[float] = None
    ci_hi: Optional[float] = None


@dataclass(frozen=True)
class MetricReport:
    auc: MetricValue
    accuracy: MetricValue
    precision: MetricValue
    recall: MetricValue
    f1: MetricValue
    n_replicates: int = 0
    redraws: int = 0

    @classmethod
    def from_bootstrap(cls, results: Dict[str, BootstrapResult]) -> "MetricReport":
        values = {}
        for name in METRIC_NAMES:
            r = results[name]
            # raw percentile band; a skewed replicate mean may fall outside it
            values[name] = MetricValue(r.point, r.ci_lo, r.ci_hi)
        first = results[METRIC_NAMES[0]]
        return cls(**values, n_replicates=len(first.replicates), redraws=first.redraws)

    def to_dict(self) -> Dict:
        out = {name: vars(getattr(self, name)).copy() for name in METRIC_NAMES}
        out["n_replicates"] = self.n_replicates
        out["redraws"] = self.redraws
        return out

    def rows(self) -> List[Dict]:
        return [
            {"metric": name, "point": v.point, "ci_lo": v.ci_lo, "ci_hi": v.ci_hi}
            for name, v in ((n, getattr(self, n)) for n in METRIC_NAMES)
        ]


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_nonzero: int
    method: Literal["exact", "normal", "degenerate"]


@dataclass(frozen=True)
class ComparisonReport:
    auc_a: BootstrapResult
    auc_b: BootstrapResult
    wilcoxon: WilcoxonResult
    significant: bool
    alpha: float = SIGNIFICANCE_LEVEL

    @property
    def p_value(self) -> float:
        return self.wilcoxon.p_value

    def to_dict(self) -> Dict:
        def side(r: BootstrapResult) -> Dict:
            return {"point": r.point, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "replicates": r.replicates.tolist()}

        return {
            "auc_a": side(self.auc_a),
            "auc_b": side(self.auc_b),
            "p_value": self.p_value,
            "statistic": self.wilcoxon.statistic,
            "test_method": self.wilcoxon.method,
            "significant": self.significant,
            "alpha": self.alpha,
            "redraws": self.auc_a.redraws,
        }


# ----------------------------
# Point metrics
# ----------------------------
def auc_from_arrays(labels: np.ndarray, scores: np.ndarray) -> float:
    """
    Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (P * N).

    Average ranks are multiples of 0.5, so twice the positive rank sum is an
    integer and the ratio matches the pairwise count exactly.
    """
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    twice_rank_sum = int(round(2.0 * ranks[labels == 1].sum()))
    numerator = twice_rank_sum - n_pos * (n_pos + 1)
    return numerator / (2.0 * n_pos * n_neg)


def roc_auc(predictions: PredictionSet) -> float:
    return auc_from_arrays(predictions.labels, predictions.scores)


def threshold_metrics_from_arrays(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> Dict[str, float]:
    predicted = (np.asarray(scores) >= threshold).astype(np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    return {
        "accuracy": float(accuracy_score(labels, predicted)),
        "precision": float(precision_score(labels, predicted, labels=[0, 1], zero_division=0)),
        "recall": float(recall_score(labels, predicted, labels=[0, 1], zero_division=0)),
        "f1": float(f1_score(labels, predicted, labels=[0, 1], zero_division=0)),
    }


def threshold_metrics(predictions: PredictionSet, threshold: float = 0.5) -> Dict[str, float]:
    """score >= threshold counts as positive; zero denominators give 0."""
    return threshold_metrics_from_arrays(predictions.labels, predictions.scores, threshold)


def all_metrics(labels: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> Dict[str, float]:
    return {"auc": auc_from_arrays(labels, scores), **threshold_metrics_from_arrays(labels, scores, threshold)}


# ----------------------------
# Bootstrap
# ----------------------------
def percentile_ci(values: Sequence[float], level: float = 0.95) -> Tuple[float, float]:
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = percentile(np.asarray(values, dtype=np.float64), [tail, 100.0 - tail])
    return float(lo), float(hi)


def draw_bootstrap_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> Tuple[List[np.ndarray], int]:
    """
    n index sets of len(labels) drawn with replacement. A set that lost a
    class is redrawn (at most MAX_REDRAWS times per replicate).
    """
    if n < 2:
        raise MetricsError(f"Bootstrap needs n >= 2 replicates, got {n}")
    size = len(labels)
    if size < 2:
        raise MetricsError("Bootstrap needs at least two cases")
    if np.unique(labels).size < 2:
        raise MetricsError("Bootstrap needs both classes in the evaluated set")

    sets, redraws = [], 0
    for _ in range(n):
        for attempt in range(MAX_REDRAWS + 1):
            idx = rng.integers(0, size, size=size)
            if np.unique(labels[idx]).size == 2:
                break
            redraws += 1
            logger.debug("Bootstrap replicate lost a class, redrawing")
        else:
            raise MetricsError(f"No two-class resample after {MAX_REDRAWS} redraws")
        sets.append(idx)
    return sets, redraws


def _result(metric: str, values: Sequence[float], seed: Optional[int], redraws: int) -> BootstrapResult:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = percentile_ci(values)
    return BootstrapResult(metric, values, float(values.mean()), lo, hi, seed, redraws)


def bootstrap(
    predictions: PredictionSet,
    n: int = 100,
    rng: Optional[np.random.Generator] = None,
    threshold: float = 0.5,
    seed: Optional[int] = None,
) -> Dict[str, BootstrapResult]:
    """
    Percentile bootstrap of all five metrics over shared resamples.

    Either pass `rng`, or `seed` to build one; point = mean of replicates.
    """
    if rng is None:
        if seed is None:
            raise MetricsError("bootstrap needs an rng or a seed")
        rng = np.random.default_rng(seed)
    sets, redraws = draw_bootstrap_indices(predictions.labels, n, rng)

    per_metric: Dict[str, List[float]] = {name: [] for name in METRIC_NAMES}
    for idx in sets:
        for name, value in all_metrics(predictions.labels[idx], predictions.scores[idx], threshold).items():
            per_metric[name].append(value)
    if redraws:
        logger.info(f"Bootstrap: {redraws} single-class resamples redrawn")
    return {name: _result(name, vals, seed, redraws) for name, vals in per_metric.items()}


def evaluate(predictions: PredictionSet, n: int = 100, rng: Optional[np.random.Generator] = None,
             threshold: float = 0.5, seed: Optional[int] = None) -> MetricReport:
    return MetricReport.from_bootstrap(bootstrap(predictions, n, rng, threshold, seed))


# ----------------------------
# Wilcoxon signed-rank
# ----------------------------
def _exact_two_sided(doubled_ranks: np.ndarray, doubled_stat: int) -> float:
    """
    P(|W+ - mean| >= |observed - mean|) under random signs, counting all 2^m
    sign assignments through a subset-sum table over doubled ranks.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(np.int64):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    sums = np.arange(total + 1, dtype=np.int64)
    extreme = np.abs(2 * sums - total) >= abs(2 * doubled_stat - total)
    return float(counts[extreme].sum()) / float(2 ** len(doubled_ranks))


def signed_rank_test(
    a: Sequence[float],
    b: Sequence[float],
    zero_method: Literal["wilcox", "pratt"] = "wilcox",
    exact_max: int = EXACT_MAX_NONZERO,
) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test on d = a - b.

    wilcox drops zero differences before ranking; pratt ranks them and then
    drops their ranks. Ties share average ranks. Exact enumeration when the
    non-zero count m <= exact_max, otherwise the normal approximation with
    the tie-corrected variance and a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"Paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    if a.size < 1:
        raise MetricsError("Paired samples must not be empty")
    d = a - b
    if not np.isfinite(d).all():
        raise MetricsError("Paired samples contain non-finite values")

    nonzero = d != 0
    m = int(nonzero.sum())
    if m == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_nonzero=0, method="degenerate")

    if zero_method == "wilcox":
        d = d[nonzero]
        ranks = rankdata(np.abs(d), method="average")
    elif zero_method == "pratt":
        ranks = rankdata(np.abs(d), method="average")[nonzero]
        d = d[nonzero]
    else:
        raise MetricsError(f"Unknown zero_method '{zero_method}', expected wilcox or pratt")

    w_plus = float(ranks[d > 0].sum())
    if m <= exact_max:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_two_sided(doubled, int(round(2.0 * w_plus)))
        method = "exact"
    else:
        mean = ranks.sum() / 2.0
        # sum of squared average ranks / 4 == m(m+1)(2m+1)/24 - sum(t^3 - t)/48 for plain ranks
        var = float((ranks ** 2).sum()) / 4.0
        z = max(abs(w_plus - mean) - 0.5, 0.0) / np.sqrt(var)
        p = float(2.0 * norm.sf(z))
        method = "normal"
    p = min(1.0, max(p, np.finfo(np.float64).tiny))
    return WilcoxonResult(statistic=w_plus, p_value=p, n_nonzero=m, method=method)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], zero_method: str = "wilcox",
                         exact_max: int = EXACT_MAX_NONZERO) -> float:
    """Two-sided p value; all-zero differences give 1.0."""
    return signed_rank_test(a, b, zero_method, exact_max).p_value


# ----------------------------
# Paired comparison
# ----------------------------
def compare_methods(
    pred_a: PredictionSet,
    pred_b: PredictionSet,
    n: int = 100,
    rng: Optional[np.random.Generator] = None,
    metric: MetricFn = auc_from_arrays,
    alpha: float = SIGNIFICANCE_LEVEL,
    seed: Optional[int] = None,
    zero_method: str = "wilcox",
) -> ComparisonReport:
    """
    Paired bootstrap: each resampled index set is applied to both methods,
    then a signed-rank test runs on the n paired metric values.
    """
    if pred_a.ids != pred_b.ids:
        missing = sorted(set(pred_a.ids) ^ set(pred_b.ids))
        raise MetricsError(f"Prediction sets cover different cases (e.g. {missing[:3]})")
    if not np.array_equal(pred_a.labels, pred_b.labels):
        raise MetricsError("Prediction sets disagree on labels")
    if rng is None:
        if seed is None:
            raise MetricsError("compare_methods needs an rng or a seed")
        rng = np.random.default_rng(seed)

    sets, redraws = draw_bootstrap_indices(pred_a.labels, n, rng)
    values_a, values_b = [], []
    for idx in sets:
        values_a.append(metric(pred_a.labels[idx], pred_a.scores[idx]))
        values_b.append(metric(pred_b.labels[idx], pred_b.scores[idx]))

    test = signed_rank_test(values_a, values_b, zero_method=zero_method)
    return ComparisonReport(
        auc_a=_result("auc", values_a, seed, redraws),
        auc_b=_result("auc", values_b, seed, redraws),
        wilcoxon=test,
        significant=test.p_value < alpha,
        alpha=alpha,
    )


# ----------------------------
# Prediction files
# ----------------------------
def save_predictions(predictions: PredictionSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({
        "id": list(predictions.ids),
        "label": predictions.labels,
        "score": [repr(float(s)) for s in predictions.scores],
    })
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def load_predictions(path: Union[str, Path]) -> PredictionSet:
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    for col in ("id", "label", "score"):
        if col not in df.columns:
            raise MetricsError(f"Prediction file {path} lacks column '{col}'")
    return PredictionSet.from_arrays(df["id"].tolist(), df["label"].to_numpy(), df["score"].to_numpy())
