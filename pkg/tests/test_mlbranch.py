import numpy as np
import pytest

from lanewise import dataio, mlbranch, synth
from lanewise.mlbranch import build_block, blocks_from_windows, detect_direction, fit_forests

from _helpers import T0, make_samples


def _direction(n=30, lanes=(1, 2), seed=0, start=T0):
    rng = np.random.default_rng(seed)
    out = []
    for lane in lanes:
        counts = rng.integers(0, 15, n)
        trucks = [rng.integers(0, c + 1) for c in counts]
        out += make_samples(counts, rng.uniform(0, 0.5, n).round(4), trucks, start=start, lane=lane)
    return out


def test_block_shape_and_layout():
    samples = _direction()
    b = build_block(samples, T0)
    assert b.stacked.shape == (60, 2)
    s = next(x for x in samples if x.lane_index == 2 and x.interval_start == T0 + 30 * 7)
    assert b.stacked[7, 1] == s.occupancy
    assert b.stacked[30 + 7, 1] == pytest.approx(s.truck_pct)


def test_zero_count_gives_zero_truck_pct():
    samples = make_samples([0] * 30, lane=1) + make_samples([5] * 30, trucks=[5] * 30, lane=2)
    b = build_block(samples, T0)
    assert np.all(b.truck_pct[:, 0] == 0) and np.all(b.truck_pct[:, 1] == 100)


def test_lane_order_permutes_both_blocks():
    samples = _direction(lanes=(1, 2, 3))
    a = build_block(samples, T0, lanes=(1, 2, 3))
    b = build_block(samples, T0, lanes=(3, 1, 2))
    assert np.array_equal(a.stacked[:, [2, 0, 1]], b.stacked)


def test_row_interval_bijection():
    b = build_block(_direction(lanes=(1,)), T0)
    n = b.n_intervals
    cells = {(i % n, "occ" if i < n else "truck") for i in range(len(b.stacked))}
    assert len(cells) == 2 * n


def test_missing_cells_are_listed():
    samples = _direction()
    gappy = [s for s in samples if not (s.lane_index == 2 and s.interval_start == T0 + 90)]
    with pytest.raises(ValueError, match=f"lane 2 @ {T0 + 90}"):
        build_block(gappy, T0)


def test_blocks_need_every_lane():
    windows = dataio.build_windows(_direction(n=60) + make_samples([1] * 30, lane=3))
    blocks = blocks_from_windows(windows)
    # lane 3 only covers the first span, so only that span is complete
    assert [b.timestamps[0] for b in blocks] == [T0]
    assert blocks[0].lanes == (1, 2, 3)


def test_calibration_on_training_block():
    samples, _, _ = synth.generate(synth.ScenarioConfig(hours=24, injections=[], seed=2))
    blocks = blocks_from_windows(dataio.build_windows(samples))
    forests = fit_forests(blocks, contamination=0.1, seed=0)
    assert len(forests) == 2
    rows = np.vstack([b.stacked for b in blocks])
    model = forests[blocks[0].signature]
    own = np.vstack([b.stacked for b in blocks if b.signature == blocks[0].signature])
    frac = np.mean(model.decision(own) < 0)
    assert abs(frac - 0.1) <= 1 / len(own) + 1e-12
    assert rows.shape[1] == 4


def test_congestion_intervals_flagged():
    inj = [synth.Injection("SustainedCongestion", 300, 60, (2,), 0.8)]
    train, _, _ = synth.generate(synth.ScenarioConfig(hours=24, injections=[], seed=3))
    test, _, _ = synth.generate(synth.ScenarioConfig(hours=24, injections=inj, seed=4))
    forests = fit_forests(blocks_from_windows(dataio.build_windows(train)))
    hits = []
    for b in blocks_from_windows(dataio.build_windows(test)):
        if b.direction != 1:
            continue
        flags = detect_direction(forests[b.signature], b)
        idx = (b.timestamps - T0) // 30
        hits += list(flags[(idx >= 300) & (idx < 360)])
    assert len(hits) == 60 and np.mean(hits) >= 0.8


def test_empty_road_seen_in_training_is_normal():
    lanes = (1, 2)
    rng = np.random.default_rng(0)
    samples = []
    for k in range(40):
        start = T0 + k * 900
        if k % 4 == 0:
            samples += [s for lane in lanes for s in make_samples([0] * 30, [0.0] * 30, start=start, lane=lane)]
        else:
            samples += _direction(lanes=lanes, seed=k, start=start)
    blocks = blocks_from_windows(dataio.build_windows(samples))
    model = fit_forests(blocks)[blocks[0].signature]
    empty = blocks[0]
    assert np.all(empty.stacked == 0)
    assert not detect_direction(model, empty).any()
    del rng


def test_lane_count_mismatch():
    blocks = blocks_from_windows(dataio.build_windows(_direction(n=90)))
    model = fit_forests(blocks)[blocks[0].signature]
    three = build_block(_direction(lanes=(1, 2, 3)), T0)
    with pytest.raises(ValueError, match="lane-count mismatch"):
        detect_direction(model, three)


def test_signature_key():
    assert mlbranch.signature_key(("cam", -1, (-1, -2))) == "cam|-1|-1,-2"
