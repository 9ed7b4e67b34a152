"""ROC curves and their posterior distribution, threshold metrics, and
integrated-gradients feature attribution.

All operations are pure given a model snapshot.  This module emits data
files only (JSON/CSV); figure rendering lives in :mod:`rssbnn.plots`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import backward, leaf
from .errors import DegenerateLabels, InvalidConfig, ShapeMismatch
from .layers import BnnModel, ForwardMode

__all__ = [
    "RocCurve",
    "RocDistribution",
    "MetricsReport",
    "AttributionReport",
    "roc_points",
    "roc_distribution",
    "roc_distribution_from_scores",
    "confusion_metrics",
    "select_threshold",
    "integrated_gradients",
    "IntegratedGradientsResult",
    "feature_ranking",
    "write_metrics_json",
    "write_metrics_csv",
    "write_roc_band_csv",
    "write_roc_curve_csv",
    "write_attribution_csv",
]

METRICS_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# ROC construction
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _validate_binary(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise DegenerateLabels("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative label")
    return n_pos, n_neg


def roc_points(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores with ties grouped; AUC by the
    trapezoidal rule (equals the tie-corrected pair-ordering statistic)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos, n_neg = _validate_binary(labels)

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if scores.size > 1 else np.array([], int)
    cut = np.unique(np.concatenate([distinct, [scores.size - 1]]))
    cum_tp = np.cumsum(sorted_labels == 1)[cut]
    cum_fp = np.cumsum(sorted_labels == 0)[cut]
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


@dataclass
class RocDistribution:
    grid: np.ndarray
    mean_tpr: np.ndarray
    lower_tpr: np.ndarray
    upper_tpr: np.ndarray
    curves: list[RocCurve] = field(default_factory=list)

    @property
    def mean_auc(self) -> float:
        return float(np.trapezoid(self.mean_tpr, self.grid))


def _tpr_on_grid(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    tpr = np.interp(grid, curve.fpr, curve.tpr)
    tpr[grid <= 0.0] = 0.0
    return tpr


def roc_distribution_from_scores(
    score_matrix: np.ndarray, labels, grid: np.ndarray | None = None
) -> RocDistribution:
    """One ROC curve per posterior sample (rows of score_matrix), with
    pointwise mean and 5%/95% quantile band on a common fpr grid.

    The band is widened to include the mean where extreme samples would
    otherwise push the mean outside the quantiles.
    """
    score_matrix = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    if grid is None:
        grid = np.linspace(0.0, 1.0, 101)
    grid = np.asarray(grid, dtype=np.float64)
    curves = [roc_points(row, labels) for row in score_matrix]
    grid_tprs = np.stack([_tpr_on_grid(c, grid) for c in curves], axis=0)
    mean = grid_tprs.mean(axis=0)
    lower = np.minimum(np.quantile(grid_tprs, 0.05, axis=0), mean)
    upper = np.maximum(np.quantile(grid_tprs, 0.95, axis=0), mean)
    return RocDistribution(grid=grid, mean_tpr=mean, lower_tpr=lower, upper_tpr=upper, curves=curves)


def roc_distribution(
    model: BnnModel,
    x: np.ndarray,
    labels,
    n_curves: int,
    rng: np.random.Generator,
    grid: np.ndarray | None = None,
) -> RocDistribution:
    """Posterior ROC distribution from n_curves hard-inclusion draws."""
    if n_curves < 2:
        raise InvalidConfig(f"need at least 2 posterior curves, got {n_curves}")
    _, matrix = model.predict_proba(x, n_curves, rng)
    return roc_distribution_from_scores(matrix, labels, grid)


# ---------------------------------------------------------------------------
# threshold metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    auc: float
    sensitivity: float
    specificity: float
    precision: float
    fpr: float
    fnr: float
    fdr: float
    accuracy: float
    balanced_accuracy: float
    f1: float
    f_beta: float
    g_mean: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    zero_division_fields: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        doc = {
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "fdr": self.fdr,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "f1": self.f1,
            "f_beta_2": self.f_beta,
            "g_mean": self.g_mean,
            "threshold": self.threshold,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "zero_division_fields": list(self.zero_division_fields),
        }
        return doc


def _safe_div(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def confusion_metrics(scores, labels, threshold: float) -> MetricsReport:
    """Full metric suite at one operating point (predict positive when
    score >= threshold).  Division-by-zero cases are reported as 0 and
    flagged in ``zero_division_fields``; f_beta uses beta = 2."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidConfig(f"threshold must be in [0,1], got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _validate_binary(labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))

    flags: list[str] = []
    sensitivity = _safe_div(tp, tp + fn, "sensitivity", flags)
    specificity = _safe_div(tn, tn + fp, "specificity", flags)
    precision = _safe_div(tp, tp + fp, "precision", flags)
    accuracy = (tp + tn) / labels.size
    beta2 = 4.0
    f1 = _safe_div(2.0 * precision * sensitivity, precision + sensitivity, "f1", flags)
    f_beta = _safe_div(
        (1.0 + beta2) * precision * sensitivity,
        beta2 * precision + sensitivity,
        "f_beta",
        flags,
    )
    return MetricsReport(
        auc=roc_points(scores, labels).auc,
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        fpr=1.0 - specificity,
        fnr=1.0 - sensitivity,
        fdr=1.0 - precision,
        accuracy=accuracy,
        balanced_accuracy=0.5 * (sensitivity + specificity),
        f1=f1,
        f_beta=f_beta,
        g_mean=float(np.sqrt(sensitivity * specificity)),
        threshold=float(threshold),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        zero_division_fields=tuple(flags),
    )


def select_threshold(scores_val, labels_val, policy: str = "max_gmean") -> float:
    """Operating-point selection on validation scores.

    ``fixed_0.5`` always returns 0.5; ``max_gmean`` scans all distinct
    score values and returns the g-mean maximizer, breaking ties toward
    the smaller false-positive rate (the larger threshold).
    """
    if policy == "fixed_0.5":
        return 0.5
    if policy != "max_gmean":
        raise InvalidConfig(f"unknown threshold policy {policy!r}")
    scores = np.asarray(scores_val, dtype=np.float64)
    labels = np.asarray(labels_val)
    n_pos, n_neg = _validate_binary(labels)
    # Vectorized sweep over distinct thresholds in descending order; the
    # first maximum wins, which breaks g-mean ties toward the largest
    # threshold and therefore the smaller false-positive rate.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if scores.size > 1 else np.array([], int)
    cut = np.unique(np.concatenate([distinct, [scores.size - 1]]))
    sens = np.cumsum(sorted_labels == 1)[cut] / n_pos
    spec = 1.0 - np.cumsum(sorted_labels == 0)[cut] / n_neg
    g = np.sqrt(sens * spec)
    best = int(np.argmax(g))
    return float(np.clip(sorted_scores[cut[best]], 0.0, 1.0))


# ---------------------------------------------------------------------------
# integrated gradients
# ---------------------------------------------------------------------------


@dataclass
class IntegratedGradientsResult:
    attributions: np.ndarray
    completeness_residual: float
    delta: float  # F(x) - F(baseline)


def _mean_logit(model: BnnModel, x_node) -> float:
    out = model.forward(x_node, ForwardMode.POSTERIOR_MEAN)
    return float(out.value.array.sum())


def integrated_gradients(
    model: BnnModel,
    x: np.ndarray,
    baseline: np.ndarray | None = None,
    steps: int = 256,
) -> IntegratedGradientsResult:
    """Path-integral attribution of the posterior-mean logit.

    Uses the midpoint rule on the straight line from baseline to x; all
    steps are evaluated in one batched forward/backward pass.  The
    completeness residual |sum_i IG_i - (F(x) - F(baseline))| is reported
    alongside the attributions.
    """
    if steps < 1:
        raise InvalidConfig(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if baseline is None:
        baseline = np.zeros_like(x)
    baseline = np.asarray(baseline, dtype=np.float64).reshape(-1)
    if baseline.shape != x.shape:
        raise ShapeMismatch(f"baseline {baseline.shape} vs x {x.shape}")

    alphas = (np.arange(steps) + 0.5) / steps
    path = baseline[None, :] + alphas[:, None] * (x - baseline)[None, :]
    path_leaf = leaf(path, requires_grad=True)
    total = ad.reduce_sum(model.forward(path_leaf, ForwardMode.POSTERIOR_MEAN))
    grads = backward(total, wrt=[path_leaf])[path_leaf].array
    attributions = (x - baseline) * grads.mean(axis=0)

    f_x = _mean_logit(model, leaf(x[None, :], requires_grad=False))
    f_base = _mean_logit(model, leaf(baseline[None, :], requires_grad=False))
    delta = f_x - f_base
    residual = abs(float(attributions.sum()) - delta)
    return IntegratedGradientsResult(
        attributions=attributions, completeness_residual=residual, delta=delta
    )


@dataclass
class AttributionReport:
    positive_mean: np.ndarray  # mean IG over positive-labeled inputs
    negative_mean: np.ndarray
    top_positive: list[tuple[int, float]]
    top_negative: list[tuple[int, float]]
    n_positive_inputs: int
    n_negative_inputs: int


def feature_ranking(
    model: BnnModel,
    x: np.ndarray,
    labels: np.ndarray,
    top_k: int,
    steps: int = 256,
    max_per_class: int | None = None,
) -> AttributionReport:
    """Mean integrated gradients per feature over each class's inputs;
    top_k features per class ranked by descending mean score.

    ``max_per_class`` caps the number of inputs attributed per class
    (the first N in dataset order, keeping the result deterministic).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    _validate_binary(labels)
    if top_k < 0:
        raise InvalidConfig(f"top_k must be >= 0, got {top_k}")

    means = {}
    counts = {}
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        if max_per_class is not None:
            idx = idx[:max_per_class]
        acc = np.zeros(x.shape[1])
        for i in idx:
            acc += integrated_gradients(model, x[i], steps=steps).attributions
        means[cls] = acc / max(1, len(idx))
        counts[cls] = len(idx)

    def top(mean_vec):
        order = np.argsort(-mean_vec, kind="stable")[:top_k]
        return [(int(fid), float(mean_vec[fid])) for fid in order]

    return AttributionReport(
        positive_mean=means[1],
        negative_mean=means[0],
        top_positive=top(means[1]),
        top_negative=top(means[0]),
        n_positive_inputs=counts[1],
        n_negative_inputs=counts[0],
    )


# ---------------------------------------------------------------------------
# file emission (data only; figures live in rssbnn.plots)
# ---------------------------------------------------------------------------


def write_metrics_json(reports: dict[str, MetricsReport], path) -> None:
    doc = {"schema_version": METRICS_SCHEMA_VERSION}
    doc.update({name: rep.to_dict() for name, rep in reports.items()})
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_metrics_csv(reports: dict[str, MetricsReport], path) -> None:
    rows = []
    for name, rep in reports.items():
        doc = rep.to_dict()
        counts = doc.pop("counts")
        doc.pop("zero_division_fields")
        doc.update(counts)
        doc["operating_point"] = name
        rows.append(doc)
    fields = ["operating_point"] + [k for k in rows[0] if k != "operating_point"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_roc_band_csv(dist: RocDistribution, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr_mean", "tpr_low", "tpr_high"])
        for i in range(len(dist.grid)):
            writer.writerow(
                [dist.grid[i], dist.mean_tpr[i], dist.lower_tpr[i], dist.upper_tpr[i]]
            )


def write_roc_curve_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for f, t in zip(curve.fpr, curve.tpr):
            writer.writerow([f, t])


def write_attribution_csv(
    report: AttributionReport, feature_meta: dict[int, dict] | None, path
) -> None:
    """CSV rows (target, feature_id, name, kind, score, rank) for both
    the ransomware-indicative and the other-indicative rankings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "feature_id", "name", "kind", "score", "rank"])
        for target, ranking in (
            ("ransomware", report.top_positive),
            ("other", report.top_negative),
        ):
            for rank, (fid, score) in enumerate(ranking, start=1):
                info = (feature_meta or {}).get(fid, {})
                writer.writerow(
                    [target, fid, info.get("name", ""), info.get("kind", ""), score, rank]
                )
