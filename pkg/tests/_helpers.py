import numpy as np

from lanewise.types import INTERVAL_S, LaneSample, LaneWindow

T0 = 1704067200  # midnight UTC


def make_samples(counts, occupancy=None, trucks=None, start=T0, camera="cam", direction=1, lane=1):
    n = len(counts)
    occupancy = [0.1] * n if occupancy is None else occupancy
    trucks = [0] * n if trucks is None else trucks
    return [
        LaneSample(camera, direction, lane, start + INTERVAL_S * i, int(counts[i]), int(trucks[i]),
                   float(occupancy[i]))
        for i in range(n)
    ]


def make_window(counts=None, occupancy=None, trucks=None, **kw):
    counts = [10] * 30 if counts is None else counts
    return LaneWindow(tuple(make_samples(counts, occupancy, trucks, **kw)))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))
