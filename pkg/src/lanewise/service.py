"""FastAPI service exposing the synth/train/detect/evaluate/label workflows."""
from __future__ import annotations

import base64
import csv
import io
import re

from fastapi import FastAPI, HTTPException

from . import __version__, dataio, fusion, pipeline, synth
from .config import config_hash, load_config
from .schemas import (
    DetectRequest, DetectResponse, EvaluateRequest, EvaluateResponse, Health, ProposeRequest,
    ProposeResponse, ReviewRequest, ReviewResponse, SynthRequest, SynthResponse, TrainRequest,
    TrainResponse,
)
from .vqvae import TrainingDiverged

app = FastAPI(title="lanewise", version=__version__)

_PROVENANCE = re.compile(r"^# config_sha256=([0-9a-f]{64}) seed=(-?\d+)")


def _config(overrides: dict) -> dict:
    try:
        return load_config(overrides=overrides)
    except ValueError as exc:
        raise HTTPException(422, f"config: {exc}") from None


def _guard(fn, *args, **kwargs):
    """Map domain errors onto HTTP status codes."""
    try:
        return fn(*args, **kwargs)
    except pipeline.SignatureMismatch as exc:
        raise HTTPException(409, f"signature mismatch: {exc}") from None
    except TrainingDiverged as exc:
        raise HTTPException(500, f"training diverged: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise HTTPException(422, str(exc)) from None


def _samples(text: str, name: str = "samples"):
    handle = io.StringIO(text)
    handle.name = name
    return _guard(dataio.load_samples, handle)


def _named(text: str, name: str) -> io.StringIO:
    handle = io.StringIO(text)
    handle.name = name
    return handle


@app.get("/health", response_model=Health)
def health() -> Health:
    return Health(status="ok", version=__version__, bundle_format_version=dataio.BUNDLE_FORMAT_VERSION)


@app.post("/synth", response_model=SynthResponse)
def synth_endpoint(req: SynthRequest) -> SynthResponse:
    cfg = _config(req.config)
    scenario = dict(cfg["scenario"])
    scenario.setdefault("seed", cfg["seed"])
    scen = _guard(synth.ScenarioConfig.from_dict, scenario)
    samples, truth, injections = _guard(synth.generate, scen)
    prov = dataio.provenance_line(config_hash(cfg), scen.seed)
    out_s, out_t = io.StringIO(), io.StringIO()
    dataio.save_samples(out_s, samples, prov)
    synth.save_ground_truth(out_t, truth, prov)
    return SynthResponse(samples_csv=out_s.getvalue(), truth_csv=out_t.getvalue(), config_sha256=config_hash(cfg),
                         seed=scen.seed, injections=[i.to_dict() for i in injections])


@app.post("/train", response_model=TrainResponse)
def train_endpoint(req: TrainRequest) -> TrainResponse:
    cfg = _config(req.config)
    samples = _samples(req.samples_csv)
    truth, keys = ([], [])
    if req.exclude_csv:
        truth, keys = _guard(pipeline.load_exclusions, _named(req.exclude_csv, "exclude"))
    outcome = _guard(pipeline.train, samples, cfg, truth, keys)
    bundle = outcome.bundle
    log_csv = bundle.provenance() + outcome.report.loss_log()
    return TrainResponse(
        bundle_b64=base64.b64encode(bundle.to_bytes()).decode(),
        loss_log_csv=log_csv,
        summary={
            "config_sha256": bundle.config_hash,
            "seed": bundle.seed,
            "train_windows": outcome.n_train,
            "validation_windows": outcome.n_val,
            "excluded_windows": outcome.n_excluded,
            "stopping_epoch": outcome.report.stopping_epoch,
            "best_epoch": outcome.report.best_epoch,
            "thresholds": bundle.thresholds.to_dict()["thresholds"],
        },
    )


def _bundle(b64: str) -> pipeline.Bundle:
    try:
        raw = base64.b64decode(b64, validate=True)
    except ValueError:
        raise HTTPException(422, "bundle is not valid base64") from None
    return _guard(pipeline.Bundle.load, raw)


@app.post("/detect", response_model=DetectResponse)
def detect_endpoint(req: DetectRequest) -> DetectResponse:
    bundle = _bundle(req.bundle_b64)
    verdicts = _guard(pipeline.detect, bundle, _samples(req.samples_csv))
    out = io.StringIO()
    fusion.save_verdicts(out, verdicts, bundle.provenance())
    return DetectResponse(verdicts_csv=out.getvalue(), n_windows=len(verdicts),
                          n_flagged=sum(v.fused for v in verdicts))


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate_endpoint(req: EvaluateRequest) -> EvaluateResponse:
    verdicts = _guard(fusion.load_verdicts, _named(req.verdicts_csv, "verdicts"))
    labels = _guard(pipeline.load_label_source, _named(req.labels_csv, "labels"))
    result = _guard(pipeline.evaluate, verdicts, labels, req.overlap_k, req.balance, req.seed)
    first = req.verdicts_csv.split("\n", 1)[0]
    m = _PROVENANCE.match(first)
    prov = first + "\n" if m else dataio.provenance_line(config_hash(load_config()), req.seed)
    csv_out = io.StringIO()
    csv_out.write(prov)
    csv.writer(csv_out, lineterminator="\n").writerows(result.as_rows())
    return EvaluateResponse(report_text=prov + result.as_text(), report_csv=csv_out.getvalue(),
                            metrics=result.report.values, deep_auc=result.deep_auc)


@app.post("/label/propose", response_model=ProposeResponse)
def propose_endpoint(req: ProposeRequest) -> ProposeResponse:
    cfg = _config(req.config)
    fc = cfg["forest"]
    contamination = req.contamination if req.contamination is not None else fc["label_contamination"]
    cands = _guard(pipeline.propose, _samples(req.samples_csv), contamination, fc["trees"], fc["subsample"],
                   cfg["seed"], cfg["utc_offset_h"])
    out = io.StringIO()
    pipeline.write_candidates(out, cands, dataio.provenance_line(config_hash(cfg), cfg["seed"]))
    return ProposeResponse(candidates_csv=out.getvalue(), n_candidates=len(cands))


@app.post("/label/review", response_model=ReviewResponse)
def review_endpoint(req: ReviewRequest) -> ReviewResponse:
    cands = _guard(pipeline.read_candidates, _named(req.candidates_csv, "candidates"))
    outcome = _guard(pipeline.review, cands, _named(req.decisions_csv, "decisions"))
    first = req.candidates_csv.split("\n", 1)[0]
    prov = first + "\n" if _PROVENANCE.match(first) else ""
    out = io.StringIO()
    pipeline.write_verified(out, outcome.verified, prov)
    return ReviewResponse(verified_csv=out.getvalue(), tally=outcome.tally)
