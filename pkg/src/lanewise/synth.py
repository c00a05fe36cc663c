"""Seeded lane-wise highway traffic generator with labelled anomaly injections."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .types import INTERVAL_S, LaneSample, LaneWindow


class AnomalyKind(enum.Enum):
    LANE_BLOCKAGE = "LaneBlockage"
    FOREIGN_OBJECT = "ForeignObject"
    SUSTAINED_CONGESTION = "SustainedCongestion"
    CAMERA_SHIFT = "CameraShift"


@dataclass(frozen=True)
class Injection:
    kind: AnomalyKind
    start: int  # interval index from scenario start
    duration: int
    lanes: tuple[int, ...]  # signed lane indices
    severity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        object.__setattr__(self, "lanes", tuple(int(l) for l in self.lanes))
        if self.duration < 1:
            raise ValueError("injection duration must be >= 1")
        if not 0.0 < self.severity <= 1.0:
            raise ValueError("severity must lie in (0, 1]")
        if not self.lanes:
            raise ValueError("injection needs at least one lane")
        if len({np.sign(l) for l in self.lanes}) != 1:
            raise ValueError("injection lanes must share one direction")
        if self.kind is AnomalyKind.CAMERA_SHIFT and len(self.lanes) < 2:
            raise ValueError("CameraShift needs at least two lanes to permute")

    @property
    def stop(self) -> int:
        return self.start + self.duration

    @property
    def recovery(self) -> int:
        """Intervals of queue discharge that follow a blockage."""
        return max(1, self.duration // 2) if self.kind is AnomalyKind.LANE_BLOCKAGE else 0

    @property
    def effect_stop(self) -> int:
        return self.stop + self.recovery

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "start": self.start, "duration": self.duration,
                "lanes": list(self.lanes), "severity": self.severity}


@dataclass
class ScenarioConfig:
    camera_id: str = "cam01"
    lanes_per_direction: int = 4
    directions: tuple[int, ...] = (-1, 1)
    hours: float = 72.0
    start_epoch: int = 1704067200  # 2024-01-01T00:00:00Z
    base_rate: float = 4.0  # vehicles / 30 s / lane
    peak_rates: tuple[float, float] = (8.0, 8.0)
    peak_hours: tuple[float, float] = (8.0, 17.0)
    peak_width_h: float = 2.0
    lane_rate_factors: tuple[float, ...] = (1.2, 1.05, 0.95, 0.8)
    truck_fractions: tuple[float, ...] = (0.03, 0.08, 0.15, 0.30)
    platoon_period: float = 18.0  # samples; upstream signal cycle of about 9 minutes
    platoon_depth: float = 0.6
    saturation_count: float = 15.0
    occ_scale: float = 0.9
    occ_half: float = 20.0
    occ_noise: float = 0.02
    seed: int = 0
    n_injections: int = 40
    duration_range: tuple[int, int] = (10, 24)
    severity_range: tuple[float, float] = (0.6, 1.0)
    injections: list[Injection] | None = None

    def __post_init__(self):
        if self.start_epoch % INTERVAL_S:
            raise ValueError("start_epoch must be aligned to 30 s")
        if self.base_rate < 0 or any(r < 0 for r in self.peak_rates):
            raise ValueError("rates must be nonnegative")
        if len(self.lane_rate_factors) != self.lanes_per_direction:
            raise ValueError("lane_rate_factors needs one entry per lane")
        if len(self.truck_fractions) != self.lanes_per_direction:
            raise ValueError("truck_fractions needs one entry per lane")
        if self.injections is not None:
            self.injections = [i if isinstance(i, Injection) else Injection(**i) for i in self.injections]

    @property
    def n_intervals(self) -> int:
        return int(round(self.hours * 3600 / INTERVAL_S))

    def lanes(self, direction: int) -> list[int]:
        return [int(np.sign(direction)) * k for k in range(1, self.lanes_per_direction + 1)]

    def all_lanes(self) -> list[int]:
        return [l for d in self.directions for l in self.lanes(d)]

    def rate(self, hour: np.ndarray) -> np.ndarray:
        """Diurnal arrival rate per 30 s for a nominal lane."""
        lam = np.full_like(hour, self.base_rate, dtype=np.float64)
        for amp, centre in zip(self.peak_rates, self.peak_hours):
            lam += amp * np.exp(-0.5 * ((hour - centre) / self.peak_width_h) ** 2)
        return lam

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kw = {}
        for k, v in data.items():
            kw[k] = tuple(v) if isinstance(v, list) and k != "injections" else v
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injections"] = None if self.injections is None else [i.to_dict() for i in self.injections]
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True, order=True)
class GroundTruthInterval:
    lane_index: int
    interval_start: int
    kind: str
    camera_id: str | None = None


def _check_overlaps(injections: Sequence[Injection]) -> None:
    busy: dict[int, list[Injection]] = {}
    for inj in injections:
        for lane in inj.lanes:
            for other in busy.get(lane, []):
                if inj.start < other.effect_stop and other.start < inj.effect_stop:
                    raise ValueError(
                        f"overlapping injections on lane {lane}: {other.kind.value}@{other.start} "
                        f"and {inj.kind.value}@{inj.start}"
                    )
            busy.setdefault(lane, []).append(inj)


def random_injections(config: ScenarioConfig, rng: np.random.Generator) -> list[Injection]:
    """Spread ``n_injections`` over all four kinds without same-lane overlap."""
    kinds = list(AnomalyKind)
    n = config.n_intervals
    lo, hi = config.duration_range
    out: list[Injection] = []
    for i in range(config.n_injections):
        kind = kinds[i % len(kinds)]
        for _ in range(1000):
            direction = config.directions[rng.integers(len(config.directions))]
            lanes = config.lanes(direction)
            if kind is not AnomalyKind.CAMERA_SHIFT:
                lanes = [lanes[rng.integers(len(lanes))]]
            duration = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, n - duration))
            severity = float(rng.uniform(*config.severity_range))
            cand = Injection(kind, start, duration, tuple(lanes), severity)
            try:
                _check_overlaps(out + [cand])
            except ValueError:
                continue
            out.append(cand)
            break
        else:
            raise RuntimeError("could not place injections without overlap")
    return out


def _occupancy(config, counts, rng):
    occ = config.occ_scale * counts / (counts + config.occ_half)
    occ = occ + rng.normal(0.0, config.occ_noise, size=np.shape(counts))
    return np.clip(occ, 0.0, 1.0)


def _apply(inj: Injection, lanes: dict, config: ScenarioConfig, rng: np.random.Generator) -> None:
    sl = slice(inj.start, inj.stop)
    n = len(next(iter(lanes.values()))["count"])
    sev = inj.severity
    kind = inj.kind
    if kind is AnomalyKind.CAMERA_SHIFT:
        src = list(inj.lanes)
        dst = src[::-1]
        snap = {l: {k: v[sl].copy() for k, v in lanes[l].items()} for l in src}
        for s, d in zip(src, dst):
            for k in ("count", "truck", "occ"):
                lanes[d][k][sl] = snap[s][k]
            lanes[d]["occ"][sl] = np.clip(lanes[d]["occ"][sl] * (1.0 + 0.5 * sev), 0.0, 2.0)
        return

    (lane,) = inj.lanes[:1]
    arr = lanes[lane]
    c = arr["count"][sl]
    frac = np.divide(arr["truck"][sl], c, out=np.zeros(len(c)), where=c > 0)
    if kind is AnomalyKind.LANE_BLOCKAGE:
        # blocked lane leaks vehicles in merge bursts; diverted vehicles move to neighbours
        burst = np.where(np.arange(len(c)) % 4 < 2, 0.0, 2.0)
        new = rng.binomial(c, (1.0 - sev) * burst / 2.0).astype(np.int64)
        removed = c - new
        neighbours = [l for l in (lane - 1, lane + 1) if l in lanes and np.sign(l) == np.sign(lane)]
        if neighbours:
            first = rng.binomial(removed, 1.0 / len(neighbours))
            for j, nb in enumerate(neighbours):
                add = first if j == 0 else removed - first
                nbc = lanes[nb]["count"][sl]
                nb_trucks = rng.binomial(add, config.truck_fractions[abs(nb) - 1])
                lanes[nb]["count"][sl] = nbc + add
                lanes[nb]["truck"][sl] += nb_trucks
                lanes[nb]["occ"][sl] = _occupancy(config, lanes[nb]["count"][sl], rng)
        trucks = rng.binomial(new, frac)
        # the stalled vehicle sits in the detection zone
        occ = np.clip(0.6 + 0.3 * sev + np.abs(rng.normal(0.0, 0.03, len(c))), 0.0, 1.0)
        # recovery: the queue discharges at up to saturation flow (~1800 veh/h, 15 per interval)
        tail = slice(inj.stop, min(inj.effect_stop, n))
        tc = arr["count"][tail]
        tfrac = np.divide(arr["truck"][tail], tc, out=np.zeros(len(tc)), where=tc > 0)
        surge = rng.poisson(np.maximum(tc, config.saturation_count * sev)).astype(np.int64)
        arr["count"][tail] = surge
        arr["truck"][tail] = rng.binomial(surge, tfrac)
        arr["occ"][tail] = _occupancy(config, surge, rng)
    elif kind is AnomalyKind.FOREIGN_OBJECT:
        # drivers brake around the object and release in short bursts (2-minute stop-and-go)
        burst = np.where(np.arange(len(c)) % 4 < 2, 1.0 - sev, 1.0 + sev)
        new = rng.poisson(0.5 * c * burst).astype(np.int64)
        trucks = rng.binomial(new, frac)
        occ = _occupancy(config, new, rng)
    else:  # sustained congestion
        # truck-heavy creeping queue; 1 to 4 vehicles per interval keeps flow under 600 veh/h
        wave = np.where(np.arange(len(c)) % 6 < 3, 0.15, 0.85)
        new = 1 + rng.binomial(3, wave).astype(np.int64)
        truck_frac = min(0.95, config.truck_fractions[abs(lane) - 1] + 0.5 + 0.3 * sev)
        trucks = rng.binomial(new, truck_frac)
        occ = np.clip(0.65 + 0.25 * sev + np.abs(rng.normal(0.0, 0.03, len(c))), 0.61, 1.0)
    arr["count"][sl] = new
    arr["truck"][sl] = trucks
    arr["occ"][sl] = occ


def generate(config: ScenarioConfig):
    """Return (samples, ground_truth, injections) for a scenario."""
    rng = np.random.default_rng(config.seed)
    n = config.n_intervals
    times = config.start_epoch + INTERVAL_S * np.arange(n)
    hours = ((times % 86400) / 3600.0).astype(np.float64)
    lam = config.rate(hours)
    phase_rng = np.random.default_rng([config.seed, 3])

    lanes: dict[int, dict[str, np.ndarray]] = {}
    for lane in config.all_lanes():
        k = abs(lane) - 1
        phase = phase_rng.uniform(0.0, 2 * np.pi)
        wave = 1.0 + config.platoon_depth * np.sin(2 * np.pi * np.arange(n) / config.platoon_period + phase)
        counts = rng.poisson(lam * config.lane_rate_factors[k] * wave)
        trucks = rng.binomial(counts, config.truck_fractions[k])
        lanes[lane] = {"count": counts, "truck": trucks, "occ": _occupancy(config, counts, rng)}

    inj_rng = np.random.default_rng([config.seed, 1])
    if config.injections is None:
        injections = random_injections(config, inj_rng)
    else:
        injections = list(config.injections)
    for inj in injections:
        if inj.start < 0 or inj.stop > n:
            raise ValueError(f"injection {inj.kind.value}@{inj.start} outside the simulation span")
        for lane in inj.lanes:
            if lane not in lanes:
                raise ValueError(f"injection lane {lane} not in scenario")
    _check_overlaps(injections)

    truth = []
    for i, inj in enumerate(sorted(injections, key=lambda j: (j.start, j.lanes))):
        _apply(inj, lanes, config, np.random.default_rng([config.seed, 2, i]))
        for lane in inj.lanes:
            for t in range(inj.start, min(inj.effect_stop, n)):
                truth.append(GroundTruthInterval(lane, int(times[t]), inj.kind.value, config.camera_id))

    samples = []
    for lane in sorted(lanes):
        arr = lanes[lane]
        direction = int(np.sign(lane))
        for t in range(n):
            samples.append(
                LaneSample(config.camera_id, direction, lane, int(times[t]), int(arr["count"][t]),
                           int(arr["truck"][t]), round(float(arr["occ"][t]), 6))
            )
    samples.sort(key=lambda s: (s.lane_key, s.interval_start))
    return samples, sorted(truth), injections


TRUTH_HEADER = ["lane", "interval_start_epoch_s", "kind"]


def save_ground_truth(path, truth: Sequence[GroundTruthInterval], provenance: str = "") -> None:
    from .dataio import text_sink

    with text_sink(path) as fh:
        fh.write(provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for g in truth:
            w.writerow([g.lane_index, g.interval_start, g.kind])


def load_ground_truth(path) -> list[GroundTruthInterval]:
    from .dataio import DataError, read_csv_rows, source_name

    _, rows = read_csv_rows(path, TRUTH_HEADER)
    out = []
    for lineno, row in rows:
        try:
            kind = AnomalyKind(row["kind"]).value
            out.append(GroundTruthInterval(int(row["lane"]), int(row["interval_start_epoch_s"]), kind))
        except ValueError as exc:
            raise DataError(f"{source_name(path)}:{lineno}: {exc}") from None
    return out


def _truth_index(truth: Sequence[GroundTruthInterval]) -> dict:
    index: dict = {}
    for g in truth:
        index.setdefault(g.lane_index, []).append(g)
    return index


def overlap_counts(truth: Sequence[GroundTruthInterval], windows: Sequence[LaneWindow]) -> list[int]:
    """Ground-truth intervals falling inside each window (same lane, and camera when known)."""
    index = _truth_index(truth)
    out = []
    for w in windows:
        n = 0
        for g in index.get(w.lane_key[2], ()):
            if g.camera_id is not None and g.camera_id != w.lane_key[0]:
                continue
            if w.start <= g.interval_start < w.end:
                n += 1
        out.append(n)
    return out


def emit_labels(truth: Sequence[GroundTruthInterval], windows: Sequence[LaneWindow], k: int = 3) -> list[int]:
    return [int(n >= k) for n in overlap_counts(truth, windows)]


def window_kinds(truth: Sequence[GroundTruthInterval], windows: Sequence[LaneWindow]) -> list[str | None]:
    """Dominant anomaly kind overlapping each window, or None."""
    index = _truth_index(truth)
    out = []
    for w in windows:
        tally: dict[str, int] = {}
        for g in index.get(w.lane_key[2], ()):
            if (g.camera_id is None or g.camera_id == w.lane_key[0]) and w.start <= g.interval_start < w.end:
                tally[g.kind] = tally.get(g.kind, 0) + 1
        out.append(max(sorted(tally), key=tally.get) if tally else None)
    return out
