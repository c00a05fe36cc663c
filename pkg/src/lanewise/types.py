"""Lane-level domain values and the per-interval feature formulas."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

INTERVAL_S = 30
WINDOW_LEN = 30
MAX_OCCUPANCY = 2.0


class TimeOfDayGroup(enum.Enum):
    NIGHT = "Night"
    MORNING = "Morning"
    AFTERNOON = "Afternoon"
    EVENING = "Evening"


_GROUP_ORDER = (
    TimeOfDayGroup.NIGHT,
    TimeOfDayGroup.MORNING,
    TimeOfDayGroup.AFTERNOON,
    TimeOfDayGroup.EVENING,
)


def hour_group(hour: int) -> TimeOfDayGroup:
    """Night 0-5, Morning 6-11, Afternoon 12-17, Evening 18-23."""
    if not isinstance(hour, (int, np.integer)) or not 0 <= hour <= 23:
        raise ValueError(f"hour must be an integer in 0..23, got {hour!r}")
    return _GROUP_ORDER[int(hour) // 6]


def flow_rate(count: int, period_s: int = INTERVAL_S) -> float:
    """Vehicles per hour extrapolated from one interval count."""
    if period_s <= 0:
        raise ValueError("period_s must be positive")
    return count * 3600.0 / period_s


def truck_percentage(truck_count: int, count: int) -> float:
    if truck_count < 0 or count < 0:
        raise ValueError("counts must be nonnegative")
    if truck_count > count:
        raise ValueError(f"truck_count {truck_count} exceeds count {count}")
    if count == 0:
        return 0.0
    return 100.0 * truck_count / count


def average_occupancy(
    vehicle_heights: Sequence[float], roi_height: float, frame_count: int
) -> float:
    """Mean per-frame sum of bounding-box heights relative to the ROI height."""
    if roi_height <= 0:
        raise ValueError("roi_height must be positive")
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    total = 0.0
    for h in vehicle_heights:
        if h <= 0 or h > 2 * roi_height:
            raise ValueError(f"vehicle height {h} outside (0, 2*roi_height]")
        total += h / roi_height
    return total / frame_count


LaneKey = tuple[str, int, int]  # (camera_id, direction, lane_index)


@dataclass(frozen=True, order=True)
class LaneSample:
    camera_id: str
    direction: int
    lane_index: int
    interval_start: int
    count: int
    truck_count: int
    occupancy: float

    def __post_init__(self) -> None:
        if self.direction == 0:
            raise ValueError("direction must be nonzero")
        if self.lane_index == 0:
            raise ValueError("lane_index must be nonzero")
        if (self.lane_index > 0) != (self.direction > 0):
            raise ValueError(
                f"lane {self.lane_index} sign disagrees with direction {self.direction}"
            )
        if self.interval_start % INTERVAL_S != 0:
            raise ValueError(f"interval_start {self.interval_start} not aligned to 30 s")
        if self.count < 0 or self.truck_count < 0:
            raise ValueError("counts must be nonnegative")
        if self.truck_count > self.count:
            raise ValueError(
                f"truck_count {self.truck_count} exceeds count {self.count}"
            )
        if not 0.0 <= self.occupancy <= MAX_OCCUPANCY:
            raise ValueError(f"occupancy {self.occupancy} outside [0, {MAX_OCCUPANCY}]")
        if self.occupancy > 1.0:
            log.warning(
                "occupancy %.3f > 1 at lane %s t=%d", self.occupancy, self.lane_key, self.interval_start
            )

    @property
    def lane_key(self) -> LaneKey:
        return (self.camera_id, self.direction, self.lane_index)

    @property
    def flow(self) -> float:
        return flow_rate(self.count)

    @property
    def truck_pct(self) -> float:
        return truck_percentage(self.truck_count, self.count)


def local_hour(epoch_s: int, utc_offset_h: float = 0.0) -> int:
    tz = timezone(timedelta(hours=utc_offset_h))
    return datetime.fromtimestamp(epoch_s, tz).hour


@dataclass(frozen=True)
class LaneWindow:
    """Thirty consecutive samples of one lane (one 15-minute window)."""

    samples: tuple[LaneSample, ...]
    utc_offset_h: float = 0.0
    hour_of_day: int = field(init=False)

    def __post_init__(self) -> None:
        if len(self.samples) != WINDOW_LEN:
            raise ValueError(f"window needs {WINDOW_LEN} samples, got {len(self.samples)}")
        key = self.samples[0].lane_key
        for prev, cur in zip(self.samples, self.samples[1:]):
            if cur.lane_key != key:
                raise ValueError("window mixes lane keys")
            if cur.interval_start - prev.interval_start != INTERVAL_S:
                raise ValueError("window intervals are not consecutive")
        object.__setattr__(
            self, "hour_of_day", local_hour(self.samples[0].interval_start, self.utc_offset_h)
        )

    @property
    def lane_key(self) -> LaneKey:
        return self.samples[0].lane_key

    @property
    def start(self) -> int:
        return self.samples[0].interval_start

    @property
    def end(self) -> int:
        """Exclusive end time in epoch seconds."""
        return self.samples[-1].interval_start + INTERVAL_S

    @property
    def group(self) -> TimeOfDayGroup:
        return hour_group(self.hour_of_day)

    @property
    def key(self) -> tuple:
        return (*self.lane_key, self.start)

    @property
    def counts_vector(self) -> np.ndarray:
        return np.array([s.count for s in self.samples], dtype=np.float64)

    @property
    def occupancy_vector(self) -> np.ndarray:
        return np.array([s.occupancy for s in self.samples], dtype=np.float64)

    @property
    def truck_pct_vector(self) -> np.ndarray:
        return np.array([s.truck_pct for s in self.samples], dtype=np.float64)
