"""Diagnosis accuracy (AUC, ACC, DOA) and group fairness (EO, D_under, IR)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dataset import ADVANTAGED, DISADVANTAGED, GENERAL, GROUP_NAMES

THRESHOLD = 0.5


class MetricError(ValueError):
    pass


def auc(preds, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties at midrank."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    ranks = rankdata(p, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(preds, labels, threshold: float = THRESHOLD) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise MetricError("accuracy of an empty prediction set")
    return float(np.mean((p >= threshold).astype(np.int64) == y))


def doa(proficiency, students, exercises, correct, qmatrix) -> float:
    """Degree of agreement between per-concept proficiency order and response order.

    For concept k, counts ordered student pairs (a, b) with theta_a > theta_b
    over exercises covering k that both answered with different outcomes; the
    fraction where a was the one correct is the concept's DOA. Concepts without
    such pairs are skipped.
    """
    theta = np.asarray(proficiency, dtype=np.float64)
    q = np.asarray(qmatrix)
    students = np.asarray(students)
    exercises = np.asarray(exercises)
    correct = np.asarray(correct)
    num_ex, num_concepts = q.shape
    order = np.argsort(exercises, kind="stable")
    bounds = np.searchsorted(exercises[order], np.arange(num_ex + 1))
    num = np.zeros(num_concepts)
    den = np.zeros(num_concepts)
    for j in range(num_ex):
        recs = order[bounds[j] : bounds[j + 1]]
        if recs.size < 2:
            continue
        right = students[recs[correct[recs] == 1]]
        wrong = students[recs[correct[recs] == 0]]
        if right.size == 0 or wrong.size == 0:
            continue
        for k in np.flatnonzero(q[j]):
            w = np.sort(theta[wrong, k])
            r = theta[right, k]
            below = np.searchsorted(w, r, side="left")
            above = w.size - np.searchsorted(w, r, side="right")
            num[k] += below.sum()
            den[k] += below.sum() + above.sum()
    ok = den > 0
    if not np.any(ok):
        raise MetricError("DOA undefined: no concept has a discriminating pair")
    return float(np.mean(num[ok] / den[ok]))


@dataclass
class GroupCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @property
    def tpr(self) -> float:
        return self.tp / self.positives

    @property
    def fnr(self) -> float:
        return self.fn / self.positives

    @property
    def fpr(self) -> float | None:
        return self.fp / self.negatives if self.negatives else None

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0


def confusion(preds, labels, threshold: float = THRESHOLD) -> GroupCounts:
    hat = np.asarray(preds, dtype=np.float64).reshape(-1) >= threshold
    y = np.asarray(labels).reshape(-1).astype(bool)
    return GroupCounts(
        int(np.sum(hat & y)), int(np.sum(hat & ~y)), int(np.sum(~hat & ~y)), int(np.sum(~hat & y))
    )


def f2(precision: float, recall: float) -> float:
    denom = 4.0 * precision + recall
    return 0.0 if denom == 0 else 5.0 * precision * recall / denom


def pop_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


@dataclass
class FairnessReport:
    eo: float
    d_under: float
    ir: float
    groups: dict[str, GroupCounts]

    def rates(self) -> dict[str, dict[str, float | None]]:
        return {
            g: {"tpr": c.tpr, "fnr": c.fnr, "fpr": c.fpr, "records": c.positives + c.negatives}
            for g, c in self.groups.items()
        }


def fairness_report(preds, labels, record_groups, threshold: float = THRESHOLD) -> FairnessReport:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    g = np.asarray(record_groups).reshape(-1)
    counts = {}
    for code in (DISADVANTAGED, GENERAL, ADVANTAGED):
        rows = g == code
        c = confusion(p[rows], y[rows], threshold)
        if c.positives == 0:
            raise MetricError(f"group {GROUP_NAMES[code]} has no positive-label records")
        counts[GROUP_NAMES[code]] = c
    dis, adv = counts["disadvantaged"], counts["advantaged"]
    eo = pop_std([c.tpr for c in counts.values()])
    return FairnessReport(eo, dis.fnr - adv.fnr, f2(dis.precision, dis.tpr), counts)


@dataclass
class MetricsReport:
    auc: float
    acc: float
    eo: float
    d_under: float
    ir: float
    threshold: float = THRESHOLD
    doa: float | None = None
    groups: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(preds, labels, record_groups, doa_value: float | None = None) -> MetricsReport:
    fr = fairness_report(preds, labels, record_groups)
    groups = {
        name: {**asdict(c), **fr.rates()[name]} for name, c in fr.groups.items()
    }
    return MetricsReport(
        auc=auc(preds, labels),
        acc=acc(preds, labels),
        eo=fr.eo,
        d_under=fr.d_under,
        ir=fr.ir,
        doa=doa_value,
        groups=groups,
    )


def format_table(report: MetricsReport) -> str:
    lines = [
        f"{'metric':<10}{'value':>10}",
        *(
            f"{k:<10}{v:>10.4f}"
            for k, v in (
                ("EO", report.eo),
                ("D_under", report.d_under),
                ("IR", report.ir),
                ("AUC", report.auc),
                ("ACC", report.acc),
            )
        ),
    ]
    if report.doa is not None:
        lines.append(f"{'DOA':<10}{report.doa:>10.4f}")
    lines.append("")
    lines.append(f"{'group':<15}{'records':>8}{'TPR':>8}{'FNR':>8}{'FPR':>8}")
    for name, row in report.groups.items():
        fpr = "-" if row["fpr"] is None else f"{row['fpr']:.4f}"
        lines.append(f"{name:<15}{row['records']:>8}{row['tpr']:>8.4f}{row['fnr']:>8.4f}{fpr:>8}")
    return "\n".join(lines)
