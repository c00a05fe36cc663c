"""Sample CSV files, window assembly, train/validation split and bundle archives."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import zipfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import INTERVAL_S, WINDOW_LEN, LaneSample, LaneWindow

SAMPLE_HEADER = [
    "camera_id",
    "direction",
    "lane",
    "interval_start_epoch_s",
    "count",
    "truck_count",
    "occupancy",
]

BUNDLE_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class DataError(ValueError):
    """Raised for malformed input files."""


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# config_sha256={config_hash} seed={seed}\n"


def _data_lines(handle: Iterable[str]):
    """Yield (line_number, line) skipping '#' provenance comments."""
    for lineno, line in enumerate(handle, start=1):
        if line.startswith("#"):
            continue
        yield lineno, line


def source_name(source) -> str:
    return getattr(source, "name", None) or ("<text>" if hasattr(source, "read") else str(source))


def read_csv_rows(source, header: Sequence[str] | None = None):
    """Read a comment-tolerant CSV from a path or text handle.

    Returns (header, [(lineno, row_dict), ...]).
    """
    path = source_name(source)
    if hasattr(source, "read"):
        numbered = list(_data_lines(io.StringIO(source.read(), newline="")))
    else:
        with open(source, newline="") as fh:
            numbered = list(_data_lines(fh))
    if not numbered:
        raise DataError(f"{path}: empty file")
    linenos = [n for n, _ in numbered]
    reader = csv.reader(line for _, line in numbered)
    rows = list(reader)
    found = rows[0]
    if header is not None and found != list(header):
        raise DataError(f"{path}:{linenos[0]}: expected header {','.join(header)}, got {','.join(found)}")
    out = []
    for lineno, row in zip(linenos[1:], rows[1:]):
        if not row:
            continue
        if len(row) != len(found):
            raise DataError(f"{path}:{lineno}: expected {len(found)} fields, got {len(row)}")
        out.append((lineno, dict(zip(found, row))))
    return found, out


def _parse_sample(row: dict) -> LaneSample:
    return LaneSample(
        camera_id=row["camera_id"],
        direction=int(row["direction"]),
        lane_index=int(row["lane"]),
        interval_start=int(row["interval_start_epoch_s"]),
        count=int(row["count"]),
        truck_count=int(row["truck_count"]),
        occupancy=float(row["occupancy"]),
    )


def load_samples(source) -> list[LaneSample]:
    """Parse and validate a sample CSV (path or text handle), sorted by lane then time."""
    path = source_name(source)
    _, rows = read_csv_rows(source, SAMPLE_HEADER)
    samples = []
    for lineno, row in rows:
        try:
            samples.append(_parse_sample(row))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    samples.sort(key=lambda s: (s.lane_key, s.interval_start))
    return samples


def format_occupancy(value: float) -> str:
    return repr(float(value))


def write_samples(handle, samples: Iterable[LaneSample]) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(SAMPLE_HEADER)
    for s in samples:
        writer.writerow(
            [s.camera_id, s.direction, s.lane_index, s.interval_start,
             s.count, s.truck_count, format_occupancy(s.occupancy)]
        )


@contextlib.contextmanager
def text_sink(target):
    """Yield a writable text handle for a path or an already-open handle."""
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w", newline="") as fh:
            yield fh


def save_samples(target, samples: Iterable[LaneSample], provenance: str = "") -> None:
    with text_sink(target) as fh:
        fh.write(provenance)
        write_samples(fh, samples)


@dataclass
class DatasetManifest:
    source_files: list[str] = field(default_factory=list)
    samples_per_lane: dict = field(default_factory=dict)
    coverage: tuple[int, int] | None = None
    windows: int = 0
    dropped_samples: int = 0
    split_seed: int | None = None
    split_ratio: float = 0.8

    def to_dict(self) -> dict:
        return {
            "source_files": list(self.source_files),
            "samples_per_lane": {"/".join(map(str, k)): v for k, v in sorted(self.samples_per_lane.items())},
            "coverage": list(self.coverage) if self.coverage else None,
            "windows": self.windows,
            "dropped_samples": self.dropped_samples,
            "split_seed": self.split_seed,
            "split_ratio": self.split_ratio,
        }


def _runs(samples: Sequence[LaneSample]):
    """Split one lane's sorted samples into runs of consecutive intervals."""
    run: list[LaneSample] = []
    for s in samples:
        if run and s.interval_start - run[-1].interval_start != INTERVAL_S:
            yield run
            run = []
        run.append(s)
    if run:
        yield run


def build_windows(
    samples: Sequence[LaneSample],
    utc_offset_h: float = 0.0,
    manifest: DatasetManifest | None = None,
) -> list[LaneWindow]:
    """Tumbling 30-sample windows per lane run; short remainders are dropped."""
    by_lane: dict = defaultdict(list)
    for s in samples:
        by_lane[s.lane_key].append(s)
    windows = []
    dropped = 0
    for key in sorted(by_lane):
        lane = sorted(by_lane[key], key=lambda s: s.interval_start)
        for run in _runs(lane):
            full = len(run) // WINDOW_LEN
            for i in range(full):
                chunk = run[i * WINDOW_LEN:(i + 1) * WINDOW_LEN]
                windows.append(LaneWindow(tuple(chunk), utc_offset_h))
            dropped += len(run) - full * WINDOW_LEN
    if manifest is not None:
        manifest.windows += len(windows)
        manifest.dropped_samples += dropped
        for key, lane in by_lane.items():
            manifest.samples_per_lane[key] = manifest.samples_per_lane.get(key, 0) + len(lane)
        if samples:
            lo = min(s.interval_start for s in samples)
            hi = max(s.interval_start for s in samples) + INTERVAL_S
            if manifest.coverage:
                lo, hi = min(lo, manifest.coverage[0]), max(hi, manifest.coverage[1])
            manifest.coverage = (lo, hi)
    return windows


def split_windows(windows: Sequence, ratio: float = 0.8, seed: int = 0):
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(windows))
    n_train = int(np.floor(ratio * len(windows)))
    train = [windows[i] for i in order[:n_train]]
    val = [windows[i] for i in order[n_train:]]
    return train, val


# -- bundle archive ---------------------------------------------------------

def _zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_archive(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(archive_bytes(header, arrays))


def archive_bytes(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize a header plus raw little-endian arrays as a deterministic zip.

    float64 arrays stay float64, other floats are stored as float32, integers
    as int64.
    """
    index = {}
    blobs = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            dt = "<f8" if arr.dtype == np.float64 else "<f4"
        elif arr.dtype.kind in "iu":
            dt = "<i8"
        elif arr.dtype.kind == "b":
            dt = "|u1"
        else:
            raise TypeError(f"unsupported dtype for {name}: {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dt)
        index[name] = {"dtype": dt, "shape": list(data.shape)}
        blobs[name] = data.tobytes()
    head = {"format_version": BUNDLE_FORMAT_VERSION, "arrays": index, **header}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_zipinfo("header.json"), canonical_json(head))
        for name in sorted(blobs):
            zf.writestr(_zipinfo(f"arrays/{name}.bin"), blobs[name])
    return buf.getvalue()


def read_archive(source) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a bundle from a path or raw bytes."""
    path = "<bytes>" if isinstance(source, (bytes, bytearray)) else str(source)
    try:
        zf = zipfile.ZipFile(io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else source)
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path}: not a bundle archive ({exc})") from None
    with zf:
        head = json.loads(zf.read("header.json"))
        version = head.get("format_version")
        if version != BUNDLE_FORMAT_VERSION:
            raise DataError(
                f"{path}: bundle format_version {version} unsupported (expected {BUNDLE_FORMAT_VERSION})"
            )
        arrays = {}
        for name, meta in head.pop("arrays").items():
            raw = zf.read(f"arrays/{name}.bin")
            dt = np.dtype(meta["dtype"])
            arr = np.frombuffer(raw, dtype=dt).reshape(meta["shape"]).copy()
            if dt == np.dtype("|u1"):
                arr = arr.astype(bool)
            arrays[name] = arr
    return head, arrays
