"""Data-selection policy, patient-exclusive splits, metrics and run statistics."""

from __future__ import annotations

import logging
import math
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """Metric needs both classes present."""


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.60
    val: float = 0.15
    test: float = 0.25
    seed: int = 0
    # "seed": fixed split for every run; "fold": test fixed, val rotated over train+val
    mode: str = "seed"
    n_folds: int = 5

    def __post_init__(self):
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise ValueError("split fractions must sum to 1")
        if self.mode not in ("seed", "fold"):
            raise ValueError(f"unknown split mode {self.mode!r}")


@dataclass(frozen=True)
class SelectionPolicy:
    min_involvement: float = 0.40
    benign_match: bool = True


@dataclass(frozen=True)
class MetricsReport:
    auroc: float
    average_precision: float
    sensitivity: float
    specificity: float
    threshold: float
    n_cores: int

    def as_dict(self) -> dict:
        return asdict(self)

    def percent_row(self) -> dict[str, str]:
        """Metrics in percent to one decimal, the presentation used in reports."""
        return {k: f"{100 * getattr(self, k):.1f}" for k in METRICS}


METRICS = ("auroc", "average_precision", "sensitivity", "specificity")


# -- splits and selection ----------------------------------------------------


def _split_counts(n: int, spec: SplitSpec) -> tuple[int, int]:
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val


def make_splits(manifest: Sequence[Mapping], spec: SplitSpec = SplitSpec(), fold: int = 0) -> dict[str, list]:
    """Split rows into train/val/test by patient, separately per center, then pool.

    Centers with fewer than three patients cannot populate every split; they
    are assigned best-effort by the same rounding rule and a warning is logged.
    """
    if not manifest:
        raise ValueError("empty manifest")
    patients_by_center: dict[str, set] = defaultdict(set)
    center_of: dict[str, str] = {}
    for row in manifest:
        pid, cid = row["patient_id"], row["center_id"]
        if center_of.setdefault(pid, cid) != cid:
            raise ValueError(f"patient {pid} appears under two centers")
        patients_by_center[cid].add(pid)

    assignment: dict[str, str] = {}
    for k, center in enumerate(sorted(patients_by_center)):
        patients = sorted(patients_by_center[center])
        if len(patients) < 3:
            log.warning("center %s has %d patients; split is best-effort", center, len(patients))
        rng = np.random.default_rng([spec.seed, k])
        patients = [patients[i] for i in rng.permutation(len(patients))]
        n_train, n_val = _split_counts(len(patients), spec)
        pool = patients[: n_train + n_val]
        test = patients[n_train + n_val :]
        if spec.mode == "fold" and pool:
            # rotate which slice of the train+val pool serves as validation
            shift = (fold % spec.n_folds) * len(pool) // spec.n_folds
            pool = pool[shift:] + pool[:shift]
        for p in pool[:n_train]:
            assignment[p] = "train"
        for p in pool[n_train:]:
            assignment[p] = "val"
        for p in test:
            assignment[p] = "test"

    out: dict[str, list] = {"train": [], "val": [], "test": []}
    for row in manifest:
        out[assignment[row["patient_id"]]].append(row)
    return out


def select_cores(manifest: Sequence[Mapping], policy: SelectionPolicy = SelectionPolicy(), rng=None) -> list:
    """Drop low-involvement cancer cores, then subsample benign to the cancer count."""
    rng = np.random.default_rng(rng)
    cancer = [r for r in manifest if r["label"] == "cancer" and float(r["involvement"]) > policy.min_involvement]
    benign = [r for r in manifest if r["label"] == "benign"]
    if not cancer:
        raise ValueError("no cancer cores survive selection")
    if policy.benign_match:
        if len(benign) < len(cancer):
            log.warning("only %d benign cores for %d cancer cores; balance not exact", len(benign), len(cancer))
        else:
            keep = np.sort(rng.choice(len(benign), size=len(cancer), replace=False))
            benign = [benign[i] for i in keep]
    chosen = {id(r) for r in cancer + benign}
    return [r for r in manifest if id(r) in chosen]


# -- metrics -------------------------------------------------------------------


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise UndefinedMetricError("both classes must be present")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney rank statistic; tied pairs get half credit."""
    scores, labels = _check_binary(scores, labels)
    ranks = stats.rankdata(scores)  # average ranks for ties
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step integral of precision over recall, one step per distinct score."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    return MetricsReport(
        auroc=auroc(scores, labels),
        average_precision=average_precision(scores, labels),
        sensitivity=float((pred & labels).sum() / labels.sum()),
        specificity=float((~pred & ~labels).sum() / (~labels).sum()),
        threshold=float(threshold),
        n_cores=int(scores.size),
    )


# -- multi-run statistics ------------------------------------------------------


def welch_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-tailed Welch t-test p-value.

    Zero-variance samples: equal means give p = 1, different means p = 0.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 runs per method")
    if statistics.variance(a.tolist()) == 0 and statistics.variance(b.tolist()) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n_runs: int

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f}±{100 * self.std:.1f}"


def multi_run_summary(runs: Mapping[str, Iterable[MetricsReport]], compare_metric: str = "auroc"):
    """Per method: mean and sample std of every metric; pairwise Welch p-values.

    Returns ``(summary, p_values)`` where ``summary[method][metric]`` is a
    :class:`MetricSummary` and ``p_values[(m1, m2)]`` compares ``compare_metric``.
    """
    runs = {m: list(r) for m, r in runs.items()}
    summary: dict[str, dict[str, MetricSummary]] = {}
    for method, reports in runs.items():
        if len(reports) < 2:
            raise ValueError(f"method {method!r} has {len(reports)} run(s); need at least 2")
        summary[method] = {}
        for metric in METRICS:
            # statistics works in exact rationals, so identical runs give std exactly 0
            v = [float(getattr(r, metric)) for r in reports]
            summary[method][metric] = MetricSummary(statistics.mean(v), statistics.stdev(v), len(v))
    methods = list(runs)
    p_values = {}
    for i, m1 in enumerate(methods):
        for m2 in methods[i + 1 :]:
            a = [getattr(r, compare_metric) for r in runs[m1]]
            b = [getattr(r, compare_metric) for r in runs[m2]]
            p_values[(m1, m2)] = welch_p_value(a, b)
    return summary, p_values


def format_summary_table(summary) -> str:
    header = ["method", "AUROC", "Avg-Prec", "Sens", "Spec"]
    lines = ["\t".join(header)]
    for method, metrics in summary.items():
        lines.append("\t".join([method] + [str(metrics[m]) for m in METRICS]))
    return "\n".join(lines)
