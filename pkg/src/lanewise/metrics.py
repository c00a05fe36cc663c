"""Confusion-matrix metrics and evaluation reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_labels(cls, predicted: Sequence[int], actual: Sequence[int]) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        a = np.asarray(actual, dtype=bool)
        if p.shape != a.shape:
            raise ValueError("predicted and actual differ in length")
        return cls(int(np.sum(p & a)), int(np.sum(p & ~a)), int(np.sum(~p & a)), int(np.sum(~p & ~a)))


def _ratio(num, den):
    return num / den if den > 0 else None


def metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall, F1, FPR, FNR; None where a denominator is zero."""
    pre = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    if pre is None or rec is None:
        f1 = None
    elif pre + rec == 0:
        f1 = 0.0
    else:
        f1 = 2 * pre * rec / (pre + rec)
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "precision": pre,
        "recall": rec,
        "f1": f1,
        "fpr": _ratio(c.fp, c.fp + c.tn),
        "fnr": _ratio(c.fn, c.fn + c.tp),
    }


def f1_from(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes")
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


@dataclass
class Report:
    counts: ConfusionCounts
    values: dict
    per_branch: dict = field(default_factory=dict)
    recall_by_kind: dict = field(default_factory=dict)
    n_anomalous: int = 0
    n_normal: int = 0

    def as_text(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{v:.4f}"

        c = self.counts
        lines = [
            f"samples: {c.total} (anomalous {self.n_anomalous}, normal {self.n_normal})",
            f"TP={c.tp} FP={c.fp} FN={c.fn} TN={c.tn}",
        ]
        lines += [f"{k}: {fmt(v)}" for k, v in self.values.items()]
        for branch, vals in self.per_branch.items():
            lines.append(f"[{branch}] " + " ".join(f"{k}={fmt(v)}" for k, v in vals.items()))
        for kind, r in sorted(self.recall_by_kind.items()):
            lines.append(f"recall[{kind}]: {fmt(r)}")
        return "\n".join(lines) + "\n"

    def as_rows(self) -> list[list]:
        rows = [["scope", "metric", "value"]]
        for k in ("tp", "fp", "fn", "tn"):
            rows.append(["fused", k, getattr(self.counts, k)])
        for k, v in self.values.items():
            rows.append(["fused", k, "" if v is None else repr(v)])
        for branch, vals in self.per_branch.items():
            for k, v in vals.items():
                rows.append([branch, k, "" if v is None else repr(v)])
        for kind, r in sorted(self.recall_by_kind.items()):
            rows.append([f"kind:{kind}", "recall", "" if r is None else repr(r)])
        return rows


def evaluate(predicted: Mapping[tuple, bool], labels: Mapping[tuple, int],
             kinds: Mapping[tuple, str | None] | None = None,
             branches: Mapping[str, Mapping[tuple, bool]] | None = None) -> Report:
    """Score fused predictions against labels keyed by window identity."""
    if set(predicted) != set(labels):
        missing = set(labels) - set(predicted)
        extra = set(predicted) - set(labels)
        raise ValueError(f"verdict/label key mismatch: {len(missing)} missing, {len(extra)} extra")
    keys = sorted(labels)
    y = [labels[k] for k in keys]
    counts = ConfusionCounts.from_labels([predicted[k] for k in keys], y)
    report = Report(counts, metrics(counts), n_anomalous=int(sum(y)), n_normal=len(y) - int(sum(y)))
    for name, flags in (branches or {}).items():
        report.per_branch[name] = metrics(ConfusionCounts.from_labels([flags[k] for k in keys], y))
    if kinds:
        by_kind: dict = {}
        for k in keys:
            kind = kinds.get(k)
            if labels[k] and kind:
                by_kind.setdefault(kind, []).append(bool(predicted[k]))
        report.recall_by_kind = {kind: float(np.mean(v)) for kind, v in by_kind.items()}
    return report
