"""Per-time-of-day threshold calibration and three-branch verdict fusion."""
from __future__ import annotations

import ast
import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .types import TimeOfDayGroup

TIME_DEPENDENT = "time-dependent"
TIME_INDEPENDENT = "time-independent"
BRANCHES = ("deep", "rule", "ml")


def percentile(values, p: float) -> float:
    """Linear interpolation between closest order statistics."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("percentile of an empty set")
    return float(np.percentile(values, p, method="linear"))


@dataclass(frozen=True)
class ThresholdSet:
    thresholds: Mapping[TimeOfDayGroup, float]
    percentile: float = 95.0
    strategy: str = TIME_DEPENDENT

    def threshold(self, group: TimeOfDayGroup) -> float:
        try:
            return self.thresholds[group]
        except KeyError:
            raise KeyError(f"no threshold for group {group.value}") from None

    def to_dict(self) -> dict:
        return {
            "percentile": self.percentile,
            "strategy": self.strategy,
            "thresholds": {g.value: t for g, t in self.thresholds.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSet":
        return cls({TimeOfDayGroup(k): float(v) for k, v in d["thresholds"].items()},
                   float(d["percentile"]), d["strategy"])


def calibrate(errors_by_group: Mapping[TimeOfDayGroup, Sequence[float]], p: float = 95.0,
              strategy: str = TIME_DEPENDENT) -> ThresholdSet:
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    if strategy == TIME_DEPENDENT:
        thresholds = {}
        for g in TimeOfDayGroup:
            errs = errors_by_group.get(g, ())
            if len(errs) == 0:
                raise ValueError(f"no training errors for group {g.value}")
            thresholds[g] = percentile(errs, p)
    elif strategy == TIME_INDEPENDENT:
        pooled = np.concatenate([np.asarray(v, dtype=np.float64) for v in errors_by_group.values()])
        t = percentile(pooled, p)
        thresholds = {g: t for g in TimeOfDayGroup}
    else:
        raise ValueError(f"unknown threshold strategy {strategy!r}")
    if not all(np.isfinite(t) for t in thresholds.values()):
        raise ValueError("non-finite threshold")
    return ThresholdSet(thresholds, float(p), strategy)


def deep_flag(error: float, group: TimeOfDayGroup, thresholds: ThresholdSet) -> bool:
    return bool(error > thresholds.threshold(group))


class FusionPolicy:
    """Monotone boolean combination of the branch flags, e.g. ``deep or (rule and ml)``."""

    def __init__(self, expression: str = "deep or rule or ml"):
        tree = ast.parse(expression, mode="eval")
        for node in ast.walk(tree):
            if isinstance(node, ast.Name):
                if node.id not in BRANCHES:
                    raise ValueError(f"unknown branch {node.id!r} in fusion policy")
            elif not isinstance(node, (ast.Expression, ast.BoolOp, ast.And, ast.Or, ast.Load)):
                raise ValueError(f"fusion policy may only use and/or over {BRANCHES}")
        self.expression = expression
        self._code = compile(tree, "<fusion>", "eval")

    def __call__(self, deep: bool, rule: bool, ml: bool) -> bool:
        return bool(eval(self._code, {"__builtins__": {}}, {"deep": deep, "rule": rule, "ml": ml}))


@dataclass(frozen=True)
class FusedVerdict:
    camera_id: str
    direction: int
    lane_index: int
    window_start: int
    group: TimeOfDayGroup
    error: float
    deep: bool
    rule: bool
    ml: bool
    fused: bool

    @property
    def key(self) -> tuple:
        return (self.camera_id, self.direction, self.lane_index, self.window_start)


def fuse(window_key: tuple, group: TimeOfDayGroup, error: float, deep: bool, rule: bool, ml: bool,
         policy: FusionPolicy | None = None) -> FusedVerdict:
    policy = policy or FusionPolicy()
    cam, direction, lane, start = window_key
    return FusedVerdict(cam, direction, lane, start, group, float(error), bool(deep), bool(rule), bool(ml),
                        policy(deep, rule, ml))


def propagate_ml(flagged: Mapping[tuple, Iterable[int]], window_key: tuple, window_end: int) -> bool:
    """True if the window's (camera, direction) has a flagged interval inside it."""
    cam, direction, _, start = window_key
    return any(start <= t < window_end for t in flagged.get((cam, direction), ()))


VERDICT_HEADER = ["camera", "direction", "lane", "window_start", "group", "error", "deep", "rule", "ml", "fused"]


def save_verdicts(path, verdicts: Iterable[FusedVerdict], provenance: str = "") -> None:
    from .dataio import text_sink

    with text_sink(path) as fh:
        fh.write(provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_HEADER)
        for v in verdicts:
            w.writerow([v.camera_id, v.direction, v.lane_index, v.window_start, v.group.value,
                        repr(v.error), int(v.deep), int(v.rule), int(v.ml), int(v.fused)])


def load_verdicts(path) -> list[FusedVerdict]:
    from .dataio import DataError, read_csv_rows, source_name

    _, rows = read_csv_rows(path, VERDICT_HEADER)
    out = []
    for lineno, r in rows:
        try:
            out.append(FusedVerdict(r["camera"], int(r["direction"]), int(r["lane"]), int(r["window_start"]),
                                    TimeOfDayGroup(r["group"]), float(r["error"]), r["deep"] == "1",
                                    r["rule"] == "1", r["ml"] == "1", r["fused"] == "1"))
        except ValueError as exc:
            raise DataError(f"{source_name(path)}:{lineno}: {exc}") from None
    return out
