import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanewise import dataio
from lanewise.dataio import DataError, DatasetManifest, build_windows, load_samples, save_samples, split_windows
from lanewise.types import INTERVAL_S

from _helpers import T0, make_samples

HEADER = ",".join(dataio.SAMPLE_HEADER)


def _text(rows):
    return io.StringIO(HEADER + "\n" + "\n".join(rows) + "\n")


def test_load_sorts_rows():
    rows = [f"cam,1,1,{T0 + 60},5,1,0.2", f"cam,1,1,{T0},3,0,0.1", f"cam,-1,-1,{T0 + 30},4,2,0.3"]
    got = load_samples(_text(rows))
    assert len(got) == 3
    assert [s.lane_key for s in got] == [("cam", -1, -1), ("cam", 1, 1), ("cam", 1, 1)]
    assert [s.interval_start for s in got][1:] == [T0, T0 + 60]


@pytest.mark.parametrize("row,fragment", [
    (f"cam,1,1,{T0},3,5,0.2", "truck_count"),
    (f"cam,1,1,{T0 + 7},3,0,0.2", "aligned"),
    (f"cam,1,1,{T0},x,0,0.2", ":3"),
    (f"cam,1,1,{T0},3,0", ":3"),
])
def test_bad_rows_name_the_line(row, fragment):
    with pytest.raises(DataError) as info:
        load_samples(_text([f"cam,1,1,{T0 + 300},1,0,0.1", row]))
    assert fragment in str(info.value)


def test_wrong_header_rejected():
    with pytest.raises(DataError):
        load_samples(io.StringIO("a,b,c\n1,2,3\n"))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    samples = make_samples(rng.integers(0, 20, 45), rng.uniform(0, 1, 45).round(6), lane=2)
    path = tmp_path / "s.csv"
    save_samples(path, samples, dataio.provenance_line("0" * 64, 4))
    assert path.read_text().startswith("# config_sha256=" + "0" * 64 + " seed=4\n")
    assert load_samples(path) == samples


def test_windows_examples():
    assert len(build_windows(make_samples([1] * 60))) == 2
    m = DatasetManifest()
    assert len(build_windows(make_samples([1] * 59), manifest=m)) == 1
    assert m.dropped_samples == 29
    gap = make_samples([1] * 10) + make_samples([1] * 20, start=T0 + 11 * INTERVAL_S)
    m = DatasetManifest()
    assert build_windows(gap, manifest=m) == []
    assert m.dropped_samples == 30


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 150)), min_size=1, max_size=300, unique=True))
def test_windows_never_mix_or_overlap(cells):
    samples = [s for lane, t in cells for s in make_samples([1], start=T0 + t * INTERVAL_S, lane=lane)]
    windows = build_windows(samples)
    seen = set()
    for w in windows:
        assert len({s.lane_key for s in w.samples}) == 1
        for s in w.samples:
            assert (s.lane_key, s.interval_start) not in seen
            seen.add((s.lane_key, s.interval_start))


def test_split_examples():
    ws = list(range(10))
    a = split_windows(ws, 0.8, 7)
    assert (len(a[0]), len(a[1])) == (8, 2)
    assert a == split_windows(ws, 0.8, 7)
    assert tuple(map(len, split_windows([0, 1], 0.5, 3))) == (1, 1)
    with pytest.raises(ValueError):
        split_windows(ws, 1.0)


def test_split_membership_varies_with_seed():
    ws = list(range(20))
    trains = {tuple(sorted(split_windows(ws, 0.8, s)[0])) for s in range(100)}
    assert all(len(t) == 16 for t in trains)
    assert len(trains) > 90


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_partitions(n, ratio, seed):
    train, val = split_windows(list(range(n)), ratio, seed)
    assert sorted(train + val) == list(range(n))
    assert len(train) == int(np.floor(ratio * n))


def test_archive_round_trip_is_byte_identical(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "d": np.array([1.5, 2.5]),
              "i": np.array([3, -1]), "b": np.array([True, False])}
    raw = dataio.archive_bytes({"note": "x"}, arrays)
    head, back = dataio.read_archive(raw)
    assert head["note"] == "x"
    assert back["w"].dtype == np.float32 and back["d"].dtype == np.float64 and back["b"].dtype == bool
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
    head.pop("format_version")
    assert dataio.archive_bytes(head, back) == raw
    path = tmp_path / "a.lgb"
    dataio.write_archive(path, {"note": "x"}, arrays)
    assert path.read_bytes() == raw


def test_archive_version_checked():
    raw = dataio.archive_bytes({"format_version": 99}, {})
    with pytest.raises(DataError, match="format_version 99"):
        dataio.read_archive(raw)
    with pytest.raises(DataError):
        dataio.read_archive(b"not a zip")
