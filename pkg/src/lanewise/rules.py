"""Flow/occupancy traffic status rules."""
from __future__ import annotations

import enum

from .types import LaneWindow, flow_rate


class TrafficStatus(enum.Enum):
    JAM = "Jam"
    SLOW = "Slow"
    NORMAL = "Normal"


def classify(flow: float, occupancy: float) -> TrafficStatus:
    # strict inequalities throughout; boundary values fall to Normal
    if flow < 600 and occupancy > 0.6:
        return TrafficStatus.JAM
    if 600 < flow < 900 and 0.4 < occupancy < 0.6:
        return TrafficStatus.SLOW
    return TrafficStatus.NORMAL


def window_statuses(window: LaneWindow) -> list[TrafficStatus]:
    return [classify(flow_rate(s.count), s.occupancy) for s in window.samples]


def window_rule_flag(window: LaneWindow, min_slow_run: int = 3) -> bool:
    """Any Jam interval, or a run of at least ``min_slow_run`` Slow intervals."""
    run = 0
    for status in window_statuses(window):
        if status is TrafficStatus.JAM:
            return True
        run = run + 1 if status is TrafficStatus.SLOW else 0
        if run >= min_slow_run:
            return True
    return False
