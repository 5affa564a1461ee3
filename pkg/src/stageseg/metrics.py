"""Segmentation quality metrics, fold aggregation, and significance testing.

The four headline scores follow the project's reporting conventions; note
that `specificity` here is computed as TP/(TP+FP) (the published reporting
formula, identical to precision). The conventional TN/(TN+FP) quantity is
available as `true_specificity`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if hasattr(arr, "detach"):  # torch tensor
        a = arr.detach().cpu().numpy()
    if a.dtype == bool:
        a = a.astype(np.uint8)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return a.astype(np.int64)


def confusion(pred, gt) -> ConfusionCounts:
    """Pixel-exact confusion counts for a binary prediction/target pair."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & (1 - g)).sum())
    fn = int(((1 - p) & g).sum())
    tn = int(((1 - p) & (1 - g)).sum())
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: int, den: int, c: ConfusionCounts) -> float:
    """Shared zero-denominator rule: empty gt and empty pred score 1, else 0."""
    if den > 0:
        return num / den
    both_empty = (c.tp + c.fn) == 0 and (c.tp + c.fp) == 0
    return 1.0 if both_empty else 0.0


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


def specificity(c: ConfusionCounts) -> float:
    """TP/(TP+FP) — the reporting formula used here (a.k.a. precision)."""
    return _ratio(c.tp, c.tp + c.fp, c)


def true_specificity(c: ConfusionCounts) -> float:
    """Conventional TN/(TN+FP), kept under a distinct name."""
    return _ratio(c.tn, c.tn + c.fp, c)


METRIC_FUNCS = {
    "dice": dice,
    "iou": iou,
    "sensitivity": sensitivity,
    "specificity": specificity,
    "true_specificity": true_specificity,
}


def evaluate_pair(pred, gt) -> Dict[str, float]:
    """All headline metrics for one binary mask pair."""
    c = confusion(pred, gt)
    return {name: fn(c) for name, fn in METRIC_FUNCS.items()}


def evaluate_multiclass(pred_labels, gt_labels, num_classes: int,
                        include_background: bool = False) -> Dict[str, Dict[str, float]]:
    """Per-class one-vs-rest metrics plus a gt-pixel-frequency weighted mean.

    Labels are integer maps in [0, num_classes). Returns
    {"class_<k>": {...}, "weighted_mean": {...}}.
    """
    p = np.asarray(pred_labels)
    g = np.asarray(gt_labels)
    if p.shape != g.shape:
        raise ShapeError("label maps must share a shape")
    classes = range(0 if include_background else 1, num_classes)
    out: Dict[str, Dict[str, float]] = {}
    weights: List[float] = []
    for k in classes:
        scores = evaluate_pair((p == k).astype(np.uint8), (g == k).astype(np.uint8))
        out[f"class_{k}"] = scores
        weights.append(float((g == k).sum()))
    wtot = sum(weights)
    if wtot == 0:
        weights = [1.0] * len(weights)
        wtot = float(len(weights)) or 1.0
    weighted = {}
    for name in METRIC_FUNCS:
        weighted[name] = sum(
            w * out[f"class_{k}"][name] for w, k in zip(weights, classes)
        ) / wtot
    out["weighted_mean"] = weighted
    return out


@dataclass(frozen=True)
class FoldScores:
    metric: str
    values: tuple
    mean: float
    std: float


def aggregate_folds(metric: str, values: Sequence[float]) -> FoldScores:
    """Sample mean and sample (ddof=1) standard deviation across folds."""
    if len(values) < 2:
        raise ContractError("fold aggregation needs at least two folds")
    vals = tuple(float(v) for v in values)
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return FoldScores(metric=metric, values=vals, mean=mean, std=math.sqrt(var))


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # rank sum of the first group
    z: float
    p_value: float
    significant: bool  # p < 0.01


def rank_sum_test(group_a: Sequence[float], group_b: Sequence[float],
                  alpha: float = 0.01) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum test via the normal approximation.

    Uses midranks for ties, a tie-corrected variance, and a 0.5 continuity
    correction. Two identical samples (zero variance) give p = 1.
    """
    a = [float(x) for x in group_a]
    b = [float(x) for x in group_b]
    if not a or not b:
        raise ContractError("both groups must be nonempty")
    n1, n2 = len(a), len(b)
    n = n1 + n2
    ranks = rankdata(a + b)
    w = float(ranks[:n1].sum())
    mean_w = n1 * (n + 1) / 2.0

    # tie correction: subtract sum(t^3 - t) over tie groups
    _, counts = np.unique(np.asarray(a + b), return_counts=True)
    tie_term = float(((counts ** 3) - counts).sum())
    var_w = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_w <= 0:
        return RankSumResult(statistic=w, z=0.0, p_value=1.0, significant=False)

    diff = w - mean_w
    cc = 0.5 * (1 if diff > 0 else -1 if diff < 0 else 0)
    z = (diff - cc) / math.sqrt(var_w)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    p = min(max(p, 0.0), 1.0)
    return RankSumResult(statistic=w, z=z, p_value=p, significant=p < alpha)


@dataclass
class ReportRow:
    metric: str
    class_id: int
    fold: int
    value: float


@dataclass
class EvaluationReport:
    """Per-fold metric records with mean/std aggregates and optional p-values.

    Rows are (metric, class, fold, value). Aggregate rows use fold == -1 and
    carry the suffixes "_mean" / "_std" on the metric name when serialized.
    """

    rows: List[ReportRow] = field(default_factory=list)
    p_values: Dict[str, float] = field(default_factory=dict)

    def add(self, metric: str, value: float, fold: int = 0, class_id: int = 0) -> None:
        self.rows.append(ReportRow(metric=metric, class_id=class_id, fold=fold,
                                   value=float(value)))

    def add_p_value(self, label: str, p: float) -> None:
        self.p_values[label] = float(p)

    def folds_for(self, metric: str, class_id: int = 0) -> List[float]:
        return [r.value for r in self.rows
                if r.metric == metric and r.class_id == class_id]

    def summary(self) -> Dict[str, FoldScores]:
        out = {}
        keys = sorted({(r.metric, r.class_id) for r in self.rows})
        for metric, class_id in keys:
            vals = self.folds_for(metric, class_id)
            if len(vals) >= 2:
                out[f"{metric}/c{class_id}"] = aggregate_folds(metric, vals)
        return out

    def to_json(self) -> str:
        payload = {
            "rows": [[r.metric, r.class_id, r.fold, r.value] for r in self.rows],
            "p_values": self.p_values,
            "summary": {
                key: {"mean": fs.mean, "std": fs.std, "values": list(fs.values)}
                for key, fs in self.summary().items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        payload = json.loads(text)
        rep = cls()
        for metric, class_id, fold, value in payload["rows"]:
            rep.add(metric, value, fold=fold, class_id=class_id)
        rep.p_values = dict(payload.get("p_values", {}))
        return rep

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "class", "fold", "value"])
        for r in self.rows:
            writer.writerow([r.metric, r.class_id, r.fold, f"{r.value:.10g}"])
        for key, fs in self.summary().items():
            metric, cls_tag = key.split("/c")
            writer.writerow([f"{metric}_mean", cls_tag, -1, f"{fs.mean:.10g}"])
            writer.writerow([f"{metric}_std", cls_tag, -1, f"{fs.std:.10g}"])
        for label, p in self.p_values.items():
            writer.writerow([f"p_value:{label}", 0, -1, f"{p:.10g}"])
        return buf.getvalue()


