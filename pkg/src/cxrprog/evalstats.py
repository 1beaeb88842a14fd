"""ROC-AUC, percentile bootstrap intervals and paired AUC comparisons."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .errors import ContractError, UndefinedMetricError


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    example_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int8)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ContractError("scores and labels must be 1-d arrays of equal length")
        if self.example_ids is not None and len(self.example_ids) != len(self.scores):
            raise ContractError("example_ids length differs from scores")

    def __len__(self):
        return len(self.scores)

    def subset(self, idx) -> "ScoredSet":
        ids = None if self.example_ids is None else [self.example_ids[i] for i in idx]
        return ScoredSet(self.scores[idx], self.labels[idx], ids)


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(xs)]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative example")
    ranks = midranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(data: ScoredSet) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties counted 1/2."""
    return _auc_arrays(data.scores, data.labels)


def _resample_indices(labels: np.ndarray, n_iter: int, rng: np.random.Generator) -> np.ndarray:
    """``n_iter`` bootstrap index rows; rows missing a class are redrawn."""
    n = len(labels)
    idx = rng.integers(0, n, size=(n_iter, n))
    while True:
        pos = labels[idx].sum(axis=1)
        bad = (pos == 0) | (pos == n)
        if not bad.any():
            return idx
        idx[bad] = rng.integers(0, n, size=(int(bad.sum()), n))


def bootstrap_aucs(data: ScoredSet, n_iter: int, rng: np.random.Generator, groups=None) -> np.ndarray:
    roc_auc(data)
    if groups is None:
        idx = _resample_indices(data.labels, n_iter, rng)
        return np.array([_auc_arrays(data.scores[row], data.labels[row]) for row in idx])
    return np.array([_auc_arrays(data.scores[row], data.labels[row])
                     for row in _group_resample(groups, data.labels, n_iter, rng)])


def _group_resample(groups: Sequence[str], labels: np.ndarray, n_iter: int, rng: np.random.Generator):
    """Patient-level (cluster) bootstrap rows."""
    keys = sorted(set(groups))
    members = {k: [] for k in keys}
    for i, g in enumerate(groups):
        members[g].append(i)
    member_arrays = [np.asarray(members[k]) for k in keys]
    rows = []
    while len(rows) < n_iter:
        pick = rng.integers(0, len(keys), size=len(keys))
        row = np.concatenate([member_arrays[p] for p in pick])
        pos = labels[row].sum()
        if 0 < pos < len(row):
            rows.append(row)
    return rows


def bootstrap_ci(data: ScoredSet, n_iter: int = 1000, level: float = 0.95,
                 rng: np.random.Generator | None = None, groups=None) -> tuple[float, float]:
    """Percentile bootstrap interval for the AUC (example-level resampling by default)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    aucs = bootstrap_aucs(data, n_iter, rng, groups)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def check_aligned(a: ScoredSet, b: ScoredSet) -> None:
    if len(a) != len(b):
        raise ContractError("paired sets differ in length")
    if a.example_ids is not None and b.example_ids is not None and list(a.example_ids) != list(b.example_ids):
        raise ContractError("paired sets have misaligned example_ids")
    if not np.array_equal(a.labels, b.labels):
        raise ContractError("paired sets disagree on labels")


def paired_bootstrap_diff(a: ScoredSet, b: ScoredSet, n_iter: int = 1000,
                          rng: np.random.Generator | None = None,
                          alternative: str = "greater") -> tuple[float, float]:
    """Mean bootstrap AUC difference (a - b) and its p-value.

    ``greater``: p = fraction of resamples with difference <= 0.
    ``two-sided``: twice the smaller tail fraction, capped at 1.
    """
    check_aligned(a, b)
    rng = rng if rng is not None else np.random.default_rng(0)
    roc_auc(a)
    idx = _resample_indices(a.labels, n_iter, rng)
    diffs = np.array([_auc_arrays(a.scores[r], a.labels[r]) - _auc_arrays(b.scores[r], b.labels[r]) for r in idx])
    if alternative == "greater":
        p = float(np.mean(diffs <= 0))
    elif alternative == "two-sided":
        p = float(min(1.0, 2 * min(np.mean(diffs <= 0), np.mean(diffs >= 0))))
    else:
        raise ContractError(f"unknown alternative {alternative!r}")
    return float(diffs.mean()), p


def delong_covariance(score_sets: Sequence[np.ndarray], labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """AUCs and their DeLong covariance matrix from placement values."""
    labels = np.asarray(labels)
    pos, neg = labels == 1, labels == 0
    m, n = int(pos.sum()), int(neg.sum())
    if m < 2 or n < 2:
        raise UndefinedMetricError("DeLong needs at least two positives and two negatives")
    aucs, v10, v01 = [], [], []
    for s in score_sets:
        s = np.asarray(s, dtype=np.float64)
        tz = midranks(s)
        tx = midranks(s[pos])
        ty = midranks(s[neg])
        aucs.append((tz[pos].sum() - m * (m + 1) / 2.0) / (m * n))
        v10.append((tz[pos] - tx) / n)
        v01.append(1.0 - (tz[neg] - ty) / m)
    v10, v01 = np.array(v10), np.array(v01)
    cov = np.atleast_2d(np.cov(v10)) / m + np.atleast_2d(np.cov(v01)) / n
    return np.array(aucs), cov


def delong_test(a: ScoredSet, b: ScoredSet, alternative: str = "two-sided") -> tuple[float, float]:
    """z statistic of AUC(a) - AUC(b) and its normal p-value."""
    check_aligned(a, b)
    aucs, cov = delong_covariance([a.scores, b.scores], a.labels)
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    diff = aucs[0] - aucs[1]
    if var <= 1e-15:
        return 0.0, 1.0
    z = float(diff / np.sqrt(var))
    if alternative == "two-sided":
        p = 2 * norm.sf(abs(z))
    elif alternative == "greater":
        p = norm.sf(z)
    else:
        raise ContractError(f"unknown alternative {alternative!r}")
    return z, float(min(1.0, p))


def score_average(sets: Sequence[ScoredSet]) -> ScoredSet:
    if not sets:
        raise ContractError("score_average needs at least one set")
    for other in sets[1:]:
        check_aligned(sets[0], other)
    mean_scores = np.mean([s.scores for s in sets], axis=0)
    return ScoredSet(mean_scores, sets[0].labels.copy(), sets[0].example_ids)


# -- reports -----------------------------------------------------------------
@dataclass
class LabelResult:
    model: str
    label: str
    auc: float
    ci: tuple[float, float]
    n: int
    n_pos: int


@dataclass
class Comparison:
    model_a: str
    model_b: str
    label: str
    auc_diff: float
    p_bootstrap: float
    p_delong: float
    significant: bool


@dataclass
class EvaluationReport:
    results: list[LabelResult] = field(default_factory=list)
    comparisons: list[Comparison] = field(default_factory=list)
    alpha: float = 0.05

    def result(self, model: str, label: str) -> LabelResult:
        return next(r for r in self.results if r.model == model and r.label == label)


def evaluate_models(models: dict[str, dict[str, ScoredSet]], n_iter: int = 1000, seed: int = 0,
                    alpha: float = 0.05, reference: str | None = None) -> EvaluationReport:
    """AUC + CI for every model/label, and paired tests of ``reference`` against the rest.

    ``models`` maps model name -> label name -> ScoredSet.
    """
    report = EvaluationReport(alpha=alpha)
    names = list(models)
    for mi, name in enumerate(names):
        for li, (label, data) in enumerate(models[name].items()):
            rng = np.random.default_rng([seed, mi, li])
            report.results.append(LabelResult(name, label, roc_auc(data), bootstrap_ci(data, n_iter, 0.95, rng),
                                              len(data), int(data.labels.sum())))
    if reference is None and len(names) > 1:
        reference = names[0]
    if reference is not None:
        for mi, other in enumerate(n for n in names if n != reference):
            for li, label in enumerate(models[reference]):
                if label not in models[other]:
                    continue
                a, b = models[reference][label], models[other][label]
                rng = np.random.default_rng([seed, 1000 + mi, li])
                diff, p = paired_bootstrap_diff(a, b, n_iter, rng)
                try:
                    _, p_dl = delong_test(a, b)
                except UndefinedMetricError:
                    p_dl = float("nan")
                report.comparisons.append(Comparison(reference, other, label, diff, p, p_dl, p < alpha))
    return report


def read_scores(path) -> dict[str, ScoredSet]:
    """Scores CSV (``example_id,label_name,score,true_label``) -> label -> ScoredSet."""
    rows: dict[str, list[tuple[str, float, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["example_id", "label_name", "score", "true_label"]:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.setdefault(row["label_name"], []).append(
                (row["example_id"], float(row["score"]), int(row["true_label"])))
    out = {}
    for label, items in rows.items():
        items.sort(key=lambda r: r[0])
        out[label] = ScoredSet([r[1] for r in items], [r[2] for r in items], [r[0] for r in items])
    return out


def write_scores(path, label_sets: dict[str, ScoredSet]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["example_id", "label_name", "score", "true_label"])
        for label, data in label_sets.items():
            for eid, s, y in zip(data.example_ids, data.scores, data.labels):
                w.writerow([eid, label, repr(float(s)), int(y)])


def write_report_csv(path, report: EvaluationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["model", "label", "auc", "ci_lo", "ci_hi", "n", "n_pos"])
        for r in report.results:
            w.writerow([r.model, r.label, f"{r.auc:.6f}", f"{r.ci[0]:.6f}", f"{r.ci[1]:.6f}", r.n, r.n_pos])


def write_comparisons_csv(path, report: EvaluationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["model_a", "model_b", "label", "auc_diff", "p_bootstrap", "p_delong", "significant"])
        for c in report.comparisons:
            w.writerow([c.model_a, c.model_b, c.label, f"{c.auc_diff:.6f}", f"{c.p_bootstrap:.6f}",
                        f"{c.p_delong:.6f}", int(c.significant)])


def format_table(report: EvaluationReport, labels: Iterable[str] | None = None) -> str:
    """Two rows per model: AUC (starred when significantly above the others), then the CI."""
    models = list(dict.fromkeys(r.model for r in report.results))
    labels = list(labels or dict.fromkeys(r.label for r in report.results))
    starred = {(c.model_a, c.label) for c in report.comparisons if c.significant}
    width = max(14, *(len(m) for m in models)) + 2
    lines = [" " * width + "".join(f"{lab:>18}" for lab in labels)]
    for m in models:
        top, bottom = [], []
        for lab in labels:
            try:
                r = report.result(m, lab)
            except StopIteration:
                top.append(f"{'-':>18}")
                bottom.append(f"{'':>18}")
                continue
            mark = "*" if (m, lab) in starred else ""
            top.append(f"{r.auc:.3f}{mark}".rjust(18))
            bottom.append(f"({r.ci[0]:.3f}, {r.ci[1]:.3f})".rjust(18))
        lines.append(m.ljust(width) + "".join(top))
        lines.append(" " * width + "".join(bottom))
    return "\n".join(lines)
