"""Train, detect, evaluate and labeling workflows over lane-sample data."""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import dataio, fusion, iforest, mlbranch, rules, synth, vqvae, wavelet
from .config import config_hash, load_config
from .metrics import Report, evaluate as score_verdicts, roc_auc
from .types import INTERVAL_S, WINDOW_LEN, LaneSample, LaneWindow, TimeOfDayGroup

log = logging.getLogger(__name__)

WINDOW_SPAN_S = WINDOW_LEN * INTERVAL_S


class SignatureMismatch(ValueError):
    """Data lanes do not match any direction signature stored in a bundle."""


# -- helpers ----------------------------------------------------------------

def _band(cfg: dict) -> tuple[float, float]:
    return float(cfg["wavelet"]["min_period"]), float(cfg["wavelet"]["max_period"])


def spectrograms(windows: Sequence[LaneWindow], constant: float | None, band) -> np.ndarray:
    if not windows:
        return np.zeros((0, wavelet.N_SCALES, wavelet.N_TIME))
    raw = wavelet.cwt(np.stack([w.counts_vector for w in windows]), band)
    return raw if constant is None else wavelet.normalize(raw, constant)


def direction_signatures(windows: Iterable[LaneWindow]) -> set[tuple]:
    lanes: dict = defaultdict(set)
    for w in windows:
        cam, direction, lane = w.lane_key
        lanes[(cam, direction)].add(lane)
    return {(cam, d, tuple(sorted(ls, key=abs))) for (cam, d), ls in lanes.items()}


def dirty_spans(truth: Sequence[synth.GroundTruthInterval] = (), window_keys: Iterable[tuple] = (),
                starts: Iterable[tuple] = ()) -> set[tuple]:
    """(direction, window_start) spans touched by known anomalies.

    ``starts`` lists the candidate (camera, direction, start) spans; truth
    intervals mark every span of their direction containing them.
    """
    out = set()
    by_dir: dict = defaultdict(list)
    for g in truth:
        by_dir[int(np.sign(g.lane_index))].append(g)
    for cam, direction, start in starts:
        for g in by_dir.get(direction, ()):
            if (g.camera_id is None or g.camera_id == cam) and start <= g.interval_start < start + WINDOW_SPAN_S:
                out.add((cam, direction, start))
                break
    for cam, direction, _lane, start in window_keys:
        out.add((cam, direction, start))
    return out


def clean_windows(windows: Sequence[LaneWindow], truth=(), window_keys=()) -> list[LaneWindow]:
    starts = {(w.lane_key[0], w.lane_key[1], w.start) for w in windows}
    dirty = dirty_spans(truth, window_keys, starts)
    return [w for w in windows if (w.lane_key[0], w.lane_key[1], w.start) not in dirty]


# -- bundle -----------------------------------------------------------------

@dataclass
class Bundle:
    config: dict
    normalizer: float
    model: vqvae.VQVAE
    thresholds: fusion.ThresholdSet
    forests: dict
    ml_window_thresholds: dict
    manifest: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def provenance(self) -> str:
        return dataio.provenance_line(self.config_hash, self.seed)

    def to_bytes(self) -> bytes:
        arrays = {f"vqvae.{k}": v for k, v in self.model.state_dict().items()}
        forests = []
        for sig in sorted(self.forests, key=mlbranch.signature_key):
            key = mlbranch.signature_key(sig)
            meta, arr = self.forests[sig].to_arrays(prefix=f"forest.{key}.")
            arrays.update(arr)
            forests.append({"signature": [sig[0], sig[1], list(sig[2])], "key": key, "meta": meta,
                            "ml_window_threshold": self.ml_window_thresholds[sig]})
        header = {
            "config": self.config,
            "config_sha256": self.config_hash,
            "normalizer": self.normalizer,
            "thresholds": self.thresholds.to_dict(),
            "fusion": {"policy": self.config["fusion"]["policy"], "slow_run": self.config["fusion"]["slow_run"]},
            "forests": forests,
            "manifest": self.manifest,
        }
        return dataio.archive_bytes(header, arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, source) -> "Bundle":
        head, arrays = dataio.read_archive(source)
        model = vqvae.VQVAE(beta=head["config"]["train"]["beta"])
        model.load_state_dict({k[len("vqvae."):]: v for k, v in arrays.items() if k.startswith("vqvae.")})
        forests, ml_thr = {}, {}
        for entry in head["forests"]:
            cam, direction, lanes = entry["signature"]
            sig = (cam, int(direction), tuple(int(l) for l in lanes))
            forests[sig] = iforest.IsolationForestModel.from_arrays(entry["meta"], arrays,
                                                                   prefix=f"forest.{entry['key']}.")
            ml_thr[sig] = entry["ml_window_threshold"]
        return cls(head["config"], float(head["normalizer"]), model,
                   fusion.ThresholdSet.from_dict(head["thresholds"]), forests, ml_thr, head.get("manifest", {}))


# -- train ------------------------------------------------------------------

@dataclass
class TrainOutcome:
    bundle: Bundle
    report: vqvae.TrainReport
    n_train: int
    n_val: int
    n_excluded: int


def _ml_counts(forest, blocks) -> list[int]:
    return [int(mlbranch.detect_direction(forest, b).sum()) for b in blocks]


def train(samples: Sequence[LaneSample], cfg: dict | None = None, truth=(), exclude_keys=(),
          on_epoch=None) -> TrainOutcome:
    """Fit normalizer, VQ-VAE, thresholds and direction forests on anomaly-free windows."""
    cfg = cfg or load_config()
    tc = cfg["train"]
    manifest = dataio.DatasetManifest(split_seed=cfg["seed"], split_ratio=tc["split_ratio"])
    windows = dataio.build_windows(samples, cfg["utc_offset_h"], manifest)
    if not windows:
        raise ValueError("no complete 30-interval windows in the training data")
    clean = clean_windows(windows, truth, exclude_keys)
    if len(clean) < 2:
        raise ValueError("fewer than two anomaly-free windows left for training")
    train_w, val_w = dataio.split_windows(clean, tc["split_ratio"], cfg["seed"])
    if not val_w:
        raise ValueError("validation split is empty; add data or lower split_ratio")

    band = _band(cfg)
    raw_train = spectrograms(train_w, None, band)
    constant = wavelet.fit_normalizer(raw_train)
    x_train = wavelet.normalize(raw_train, constant)
    x_val = spectrograms(val_w, constant, band)
    config = vqvae.TrainConfig(
        lr=tc["lr"], weight_decay=tc["weight_decay"], momentum=tc["momentum"], batch_size=tc["batch_size"],
        max_epochs=tc["max_epochs"], patience=tc["patience"], min_delta=tc["min_delta"], beta=tc["beta"],
        seed=cfg["seed"], reduction=tc["reduction"], optimizer=tc["optimizer"],
    )
    model, report = vqvae.train(x_train, x_val, config, on_epoch=on_epoch)

    errors = model.reconstruction_errors(x_train)
    by_group: dict = defaultdict(list)
    for w, e in zip(train_w, errors):
        by_group[w.group].append(float(e))
    report.errors_by_group = {g: np.asarray(v) for g, v in by_group.items()}
    thr = cfg["thresholds"]
    thresholds = fusion.calibrate(report.errors_by_group, thr["percentile"], thr["strategy"])

    fc = cfg["forest"]
    blocks = mlbranch.blocks_from_windows(clean)
    if not blocks:
        raise ValueError("no complete direction blocks for the ML branch")
    forests = mlbranch.fit_forests(blocks, fc["ml_contamination"], fc["trees"], fc["subsample"], cfg["seed"])
    ml_thr = {}
    pct = cfg["fusion"]["ml_window_percentile"]
    for sig, forest in forests.items():
        if pct is None:
            ml_thr[sig] = 0.0
        else:
            counts = _ml_counts(forest, [b for b in blocks if b.signature == sig])
            ml_thr[sig] = fusion.percentile(counts, pct)

    info = manifest.to_dict()
    info.update(train_windows=len(train_w), validation_windows=len(val_w),
                excluded_windows=len(windows) - len(clean), stopping_epoch=report.stopping_epoch,
                best_epoch=report.best_epoch)
    bundle = Bundle(cfg, constant, model, thresholds, forests, ml_thr, info)
    return TrainOutcome(bundle, report, len(train_w), len(val_w), len(windows) - len(clean))


# -- detect -----------------------------------------------------------------

def check_signatures(bundle: Bundle, windows: Sequence[LaneWindow]) -> None:
    known = set(bundle.forests)
    for sig in sorted(direction_signatures(windows), key=mlbranch.signature_key):
        if sig not in known:
            have = ", ".join(mlbranch.signature_key(s) for s in sorted(known, key=mlbranch.signature_key))
            raise SignatureMismatch(
                f"direction signature {mlbranch.signature_key(sig)} not in bundle (bundle has: {have})"
            )


def ml_span_flags(bundle: Bundle, windows: Sequence[LaneWindow]) -> dict[tuple, bool]:
    """(camera, direction, start) -> window-level ML flag."""
    out = {}
    for block in mlbranch.blocks_from_windows(windows):
        forest = bundle.forests[block.signature]
        flagged = mlbranch.detect_direction(forest, block)
        out[(block.camera_id, block.direction, int(block.timestamps[0]))] = bool(
            flagged.sum() > bundle.ml_window_thresholds[block.signature]
        )
    return out


def detect(bundle: Bundle, samples: Sequence[LaneSample]) -> list[fusion.FusedVerdict]:
    cfg = bundle.config
    windows = dataio.build_windows(samples, cfg["utc_offset_h"])
    if not windows:
        raise ValueError("no complete 30-interval windows in the data")
    check_signatures(bundle, windows)
    errors = bundle.model.reconstruction_errors(spectrograms(windows, bundle.normalizer, _band(cfg)))
    ml = ml_span_flags(bundle, windows)
    policy = fusion.FusionPolicy(cfg["fusion"]["policy"])
    verdicts = []
    missing = 0
    for w, err in zip(windows, errors):
        cam, direction, _ = w.lane_key
        span = (cam, direction, w.start)
        if span not in ml:
            missing += 1
        deep = fusion.deep_flag(err, w.group, bundle.thresholds)
        rule = rules.window_rule_flag(w, cfg["fusion"]["slow_run"])
        verdicts.append(fusion.fuse(w.key, w.group, err, deep, rule, ml.get(span, False), policy))
    if missing:
        log.warning("%d windows lack a complete direction block; their ML flag is 0", missing)
    return sorted(verdicts, key=lambda v: v.key)


# -- evaluate ---------------------------------------------------------------

WINDOW_LABEL_HEADER = ["camera", "direction", "lane", "window_start", "label"]


@dataclass
class LabelSet:
    labels: dict
    kinds: dict
    clean: set  # keys eligible as normal samples


def labels_from_truth(keys: Sequence[tuple], truth: Sequence[synth.GroundTruthInterval], k: int = 3) -> LabelSet:
    by_lane: dict = defaultdict(list)
    for g in truth:
        by_lane[g.lane_index].append(g)
    starts = {(c, d, s) for c, d, _, s in keys}
    dirty = dirty_spans(truth, (), starts)
    labels, kinds, clean = {}, {}, set()
    for key in keys:
        cam, direction, lane, start = key
        tally: dict = defaultdict(int)
        for g in by_lane.get(lane, ()):
            if (g.camera_id is None or g.camera_id == cam) and start <= g.interval_start < start + WINDOW_SPAN_S:
                tally[g.kind] += 1
        n = sum(tally.values())
        labels[key] = int(n >= k)
        kinds[key] = max(sorted(tally), key=tally.get) if tally else None
        if (cam, direction, start) not in dirty:
            clean.add(key)
    return LabelSet(labels, kinds, clean)


def load_label_source(source) -> tuple[str, object]:
    """Either ground-truth intervals or explicit window labels, chosen by header."""
    text = source.read() if hasattr(source, "read") else open(source).read()
    header = next((l for l in text.splitlines() if l and not l.startswith("#")), "")
    if header.split(",") == synth.TRUTH_HEADER:
        return "truth", synth.load_ground_truth(io.StringIO(text))
    if header.split(",")[:5] == WINDOW_LABEL_HEADER:
        _, rows = dataio.read_csv_rows(io.StringIO(text))
        out = {}
        for lineno, r in rows:
            try:
                key = (r["camera"], int(r["direction"]), int(r["lane"]), int(r["window_start"]))
                label = int(r["label"])
            except ValueError as exc:
                raise dataio.DataError(f"labels:{lineno}: {exc}") from None
            if label not in (0, 1):
                raise dataio.DataError(f"labels:{lineno}: label must be 0 or 1")
            out[key] = (label, r.get("kind") or None)
        return "windows", out
    raise dataio.DataError(
        f"labels: unrecognised header {header!r}; expected {','.join(synth.TRUTH_HEADER)} "
        f"or {','.join(WINDOW_LABEL_HEADER)}"
    )


@dataclass
class Evaluation:
    report: Report
    deep_auc: float | None
    keys: list

    def as_text(self) -> str:
        auc = "absent" if self.deep_auc is None else f"{self.deep_auc:.4f}"
        return self.report.as_text() + f"deep_error_auc: {auc}\n"

    def as_rows(self) -> list[list]:
        rows = self.report.as_rows()
        rows.append(["deep", "error_auc", "" if self.deep_auc is None else repr(self.deep_auc)])
        return rows


def evaluate(verdicts: Sequence[fusion.FusedVerdict], label_source: tuple[str, object], k: int = 3,
             balance: bool = True, seed: int = 0) -> Evaluation:
    """Score verdicts, by default on a balanced anomalous/normal sample."""
    by_key = {v.key: v for v in verdicts}
    kind, payload = label_source
    if kind == "truth":
        ls = labels_from_truth(sorted(by_key), payload, k)
    else:
        missing = set(payload) - set(by_key)
        if missing:
            raise ValueError(f"{len(missing)} labelled windows have no verdict, e.g. {sorted(missing)[0]}")
        ls = LabelSet({key: payload[key][0] for key in by_key if key in payload},
                      {key: payload[key][1] for key in by_key if key in payload},
                      {key for key in by_key if key in payload and payload[key][0] == 0})
    positives = sorted(key for key, y in ls.labels.items() if y)
    negatives = sorted(key for key, y in ls.labels.items() if not y and key in ls.clean)
    if balance:
        rng = np.random.default_rng(seed)
        if len(negatives) > len(positives):
            pick = np.sort(rng.choice(len(negatives), size=len(positives), replace=False))
            negatives = [negatives[i] for i in pick]
    keys = sorted(positives + negatives)
    if not keys:
        raise ValueError("no labelled windows to evaluate")
    labels = {key: ls.labels[key] for key in keys}
    predicted = {key: by_key[key].fused for key in keys}
    branches = {b: {key: getattr(by_key[key], b) for key in keys} for b in fusion.BRANCHES}
    report = score_verdicts(predicted, labels, {key: ls.kinds.get(key) for key in keys}, branches)
    y = [labels[key] for key in keys]
    auc = roc_auc([by_key[key].error for key in keys], y) if 0 < sum(y) < len(y) else None
    return Evaluation(report, auc, keys)


# -- labeling workflow ------------------------------------------------------

CANDIDATE_HEADER = ["rank", "camera", "direction", "lane", "window_start", "score", "decision"]
DECISION_HEADER = ["camera", "direction", "lane", "window_start", "verdict"]
VERIFIED_HEADER = ["camera", "direction", "lane", "window_start", "score"]
VERDICTS = ("accept", "reject", "defer")


@dataclass(frozen=True)
class Candidate:
    rank: int
    key: tuple
    score: float
    decision: float


def propose(samples: Sequence[LaneSample], contamination: float = 0.3, trees: int = 100, psi: int = 256,
            seed: int = 0, utc_offset_h: float = 0.0) -> list[Candidate]:
    """Windows the count-sequence forest calls anomalous, most anomalous first."""
    windows = dataio.build_windows(samples, utc_offset_h)
    if len(windows) < 2:
        raise ValueError("need at least two windows to fit the labeling forest")
    x = np.stack([w.counts_vector for w in windows]).astype(np.float64)
    forest = iforest.fit(x, contamination, trees, psi, seed)
    scores, decisions = forest.score(x), forest.decision(x)
    idx = [i for i in range(len(windows)) if decisions[i] < 0]
    idx.sort(key=lambda i: (-scores[i], windows[i].key))
    return [Candidate(r, windows[i].key, float(scores[i]), float(decisions[i])) for r, i in enumerate(idx, 1)]


def write_candidates(target, candidates: Sequence[Candidate], provenance: str = "") -> None:
    with dataio.text_sink(target) as fh:
        fh.write(provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for c in candidates:
            w.writerow([c.rank, *c.key, repr(c.score), repr(c.decision)])


def read_candidates(source) -> list[Candidate]:
    _, rows = dataio.read_csv_rows(source, CANDIDATE_HEADER)
    out = []
    for lineno, r in rows:
        try:
            key = (r["camera"], int(r["direction"]), int(r["lane"]), int(r["window_start"]))
            out.append(Candidate(int(r["rank"]), key, float(r["score"]), float(r["decision"])))
        except ValueError as exc:
            raise dataio.DataError(f"{dataio.source_name(source)}:{lineno}: {exc}") from None
    return out


@dataclass
class ReviewOutcome:
    verified: list[Candidate]
    tally: dict

    def summary(self) -> str:
        return " ".join(f"{k}={self.tally.get(k, 0)}" for k in VERDICTS)


def review(candidates: Sequence[Candidate], decisions_source) -> ReviewOutcome:
    """Merge externally edited accept/reject/defer decisions into the verified set."""
    _, rows = dataio.read_csv_rows(decisions_source, DECISION_HEADER)
    name = dataio.source_name(decisions_source)
    by_key = {c.key: c for c in candidates}
    decided: dict = {}
    for lineno, r in rows:
        try:
            key = (r["camera"], int(r["direction"]), int(r["lane"]), int(r["window_start"]))
        except ValueError as exc:
            raise dataio.DataError(f"{name}:{lineno}: {exc}") from None
        verdict = r["verdict"].strip().lower()
        if verdict not in VERDICTS:
            raise dataio.DataError(f"{name}:{lineno}: verdict must be one of {', '.join(VERDICTS)}")
        if key not in by_key:
            raise dataio.DataError(f"{name}:{lineno}: window {key} is not a candidate")
        if key in decided:
            raise dataio.DataError(f"{name}:{lineno}: duplicate decision for window {key}")
        decided[key] = verdict
    undecided = [c.key for c in candidates if c.key not in decided]
    if undecided:
        raise dataio.DataError(f"{name}: {len(undecided)} candidates lack a decision, e.g. {undecided[0]}")
    tally: dict = defaultdict(int)
    for v in decided.values():
        tally[v] += 1
    verified = [c for c in candidates if decided[c.key] == "accept"]
    return ReviewOutcome(verified, dict(tally))


def write_verified(target, verified: Sequence[Candidate], provenance: str = "") -> None:
    with dataio.text_sink(target) as fh:
        fh.write(provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERIFIED_HEADER)
        for c in verified:
            w.writerow([*c.key, repr(c.score)])


def read_window_keys(source) -> list[tuple]:
    """Window keys from any CSV carrying camera,direction,lane,window_start columns."""
    _, rows = dataio.read_csv_rows(source)
    out = []
    for lineno, r in rows:
        try:
            out.append((r["camera"], int(r["direction"]), int(r["lane"]), int(r["window_start"])))
        except (KeyError, ValueError) as exc:
            raise dataio.DataError(f"{dataio.source_name(source)}:{lineno}: {exc}") from None
    return out


def load_exclusions(source) -> tuple[list, list]:
    """Ground-truth intervals or verified window keys to keep out of training."""
    text = source.read() if hasattr(source, "read") else open(source).read()
    header = next((l for l in text.splitlines() if l and not l.startswith("#")), "")
    if header.split(",") == synth.TRUTH_HEADER:
        return synth.load_ground_truth(io.StringIO(text)), []
    return [], read_window_keys(io.StringIO(text))


def write_window_labels(target, labels: Mapping[tuple, int], kinds: Mapping[tuple, str | None] | None = None,
                        provenance: str = "") -> None:
    with dataio.text_sink(target) as fh:
        fh.write(provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WINDOW_LABEL_HEADER + ["kind"])
        for key in sorted(labels):
            w.writerow([*key, labels[key], (kinds or {}).get(key) or ""])
