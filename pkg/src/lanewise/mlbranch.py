"""Direction-level occupancy/truck-percentage blocks scored by an isolation forest."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import iforest
from .types import INTERVAL_S, LaneSample, LaneWindow, truck_percentage


@dataclass(frozen=True)
class DirectionBlock:
    camera_id: str
    direction: int
    lanes: tuple[int, ...]
    timestamps: np.ndarray  # (N,)
    occupancy: np.ndarray  # (N, L)
    truck_pct: np.ndarray  # (N, L)

    @property
    def signature(self) -> tuple:
        return (self.camera_id, self.direction, self.lanes)

    @property
    def stacked(self) -> np.ndarray:
        """Occupancy rows on top of truck-percentage rows, shape (2N, L)."""
        return np.vstack([self.occupancy, self.truck_pct])

    @property
    def n_intervals(self) -> int:
        return len(self.timestamps)


def signature_key(signature: tuple) -> str:
    camera, direction, lanes = signature
    return f"{camera}|{direction}|{','.join(map(str, lanes))}"


def build_block(samples: Sequence[LaneSample], start: int, n_intervals: int = 30,
                lanes: Sequence[int] | None = None) -> DirectionBlock:
    """Block for one (camera, direction) covering ``n_intervals`` from ``start``."""
    if not samples:
        raise ValueError("no samples for block")
    cameras = {s.camera_id for s in samples}
    directions = {s.direction for s in samples}
    if len(cameras) != 1 or len(directions) != 1:
        raise ValueError("block samples must share one camera and direction")
    lane_ids = tuple(sorted({s.lane_index for s in samples}, key=abs)) if lanes is None else tuple(lanes)
    times = start + INTERVAL_S * np.arange(n_intervals)
    col = {l: j for j, l in enumerate(lane_ids)}
    row = {int(t): i for i, t in enumerate(times)}
    occ = np.full((n_intervals, len(lane_ids)), np.nan)
    trk = np.full((n_intervals, len(lane_ids)), np.nan)
    for s in samples:
        i, j = row.get(s.interval_start), col.get(s.lane_index)
        if i is None or j is None:
            continue
        occ[i, j] = s.occupancy
        trk[i, j] = truck_percentage(s.truck_count, s.count)
    missing = np.argwhere(np.isnan(occ))
    if len(missing):
        gaps = ", ".join(f"lane {lane_ids[j]} @ {int(times[i])}" for i, j in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise ValueError(f"missing lane-interval cells: {gaps}{more}")
    return DirectionBlock(next(iter(cameras)), next(iter(directions)), lane_ids, times, occ, trk)


def blocks_from_windows(windows: Sequence[LaneWindow]) -> list[DirectionBlock]:
    """Group lane windows sharing (camera, direction, start) into blocks.

    Only spans where every lane seen for that direction has a window become
    blocks.
    """
    lanes_seen: dict = defaultdict(set)
    groups: dict = defaultdict(list)
    for w in windows:
        cam, direction, lane = w.lane_key
        lanes_seen[(cam, direction)].add(lane)
        groups[(cam, direction, w.start)].append(w)
    blocks = []
    for (cam, direction, start), ws in sorted(groups.items()):
        lanes = tuple(sorted(lanes_seen[(cam, direction)], key=abs))
        if {w.lane_key[2] for w in ws} != set(lanes):
            continue
        samples = [s for w in ws for s in w.samples]
        blocks.append(build_block(samples, start, len(ws[0].samples), lanes))
    return blocks


def fit_forests(blocks: Sequence[DirectionBlock], contamination=0.1, n_trees=100, psi=256, seed=0):
    """One forest per direction signature, fit on the stacked rows of all its blocks."""
    by_sig: dict = defaultdict(list)
    for b in blocks:
        by_sig[b.signature].append(b.stacked)
    forests = {}
    for i, sig in enumerate(sorted(by_sig, key=signature_key)):
        rows = np.vstack(by_sig[sig])
        forests[sig] = iforest.fit(rows, contamination, n_trees, psi, seed=[seed, i])
    return forests


def detect_direction(model: iforest.IsolationForestModel, block: DirectionBlock) -> np.ndarray:
    """Boolean per interval: occupancy row or truck row scored anomalous."""
    if model.n_features != len(block.lanes):
        raise ValueError(
            f"lane-count mismatch: model has {model.n_features} lanes, block has {len(block.lanes)}"
        )
    d = model.decision(block.stacked)
    n = block.n_intervals
    return (d[:n] < 0) | (d[n:] < 0)
