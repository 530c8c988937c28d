"""Classification / regression metrics, seed aggregation and gate reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    name: str
    value: float
    support: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{self.name}\t{self.value:.6f}"


def _check(preds, golds):
    if len(preds) != len(golds):
        raise MetricError(f"length mismatch: {len(preds)} predictions, {len(golds)} labels")
    if len(preds) == 0:
        raise MetricError("empty prediction list")


def accuracy(preds, golds) -> float:
    _check(preds, golds)
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def micro_f1(preds, golds) -> float:
    """F1 from counts pooled over classes."""
    _check(preds, golds)
    tp = fp = fn = 0
    for c in set(preds) | set(golds):
        for p, g in zip(preds, golds):
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(preds, golds) -> float:
    """Unweighted mean of per-class F1 over classes seen in preds or golds."""
    _check(preds, golds)
    scores = []
    for c in sorted(set(preds) | set(golds), key=repr):
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        fp = sum(p == c and g != c for p, g in zip(preds, golds))
        fn = sum(p != c and g == c for p, g in zip(preds, golds))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise MetricError("pearson needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((xc * xc).sum()), math.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise MetricError("correlation undefined for a constant vector")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


METRICS = {"micro_f1": micro_f1, "macro_f1": macro_f1, "accuracy": accuracy, "pearson": pearson}
CLASSIFICATION_METRICS = ("micro_f1", "macro_f1", "accuracy")


def compute(name: str, preds, golds, task: str) -> MetricReport:
    if name not in METRICS:
        raise MetricError(f"unknown metric {name!r}")
    if (name == "pearson") != (task == "regression"):
        raise MetricError(f"metric {name!r} does not apply to a {task} task")
    support = {}
    if task == "classification":
        for g in golds:
            support[g] = support.get(g, 0) + 1
    return MetricReport(name, METRICS[name](list(preds), list(golds)), support)


@dataclass
class SeedAggregate:
    values: list[float]
    mean: float
    std: float

    def format(self) -> str:
        """Percent with one decimal, e.g. ``60.6±4.9``."""
        return f"{100 * self.mean:.1f}±{100 * self.std:.1f}"


def aggregate_seeds(values: Sequence[float]) -> SeedAggregate:
    """Mean and population standard deviation."""
    vals = [float(v) for v in values]
    if not vals:
        raise MetricError("no values to aggregate")
    m = math.fsum(vals) / len(vals)
    if all(v == vals[0] for v in vals):
        return SeedAggregate(vals, vals[0], 0.0)
    var = math.fsum((v - m) ** 2 for v in vals) / len(vals)
    return SeedAggregate(vals, min(max(m, min(vals)), max(vals)), math.sqrt(var))


def gate_weights_csv(rows: list[tuple[int, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "mean_weight"])
    for layer, expert, value in rows:
        w.writerow([layer, expert, repr(float(value))])
    return buf.getvalue()


def summarize_gate_log(gate_log) -> list[tuple[int, int, float]]:
    """Average logged weights over non-padded tokens: (layer, expert, mean)."""
    sums: dict[tuple[int, int], float] = {}
    counts: dict[int, float] = {}
    for layer, w, mask in gate_log:
        valid = np.asarray(mask).astype(bool)
        sel = w[valid]  # tokens x E
        for e in range(sel.shape[-1]):
            sums[layer, e] = sums.get((layer, e), 0.0) + float(sel[:, e].sum())
        counts[layer] = counts.get(layer, 0.0) + sel.shape[0]
    return [(l, e, s / counts[l]) for (l, e), s in sorted(sums.items())]
