import numpy as np
import pytest

from lanewise import fusion, pipeline, synth
from lanewise.synth import GroundTruthInterval
from lanewise.types import TimeOfDayGroup

from _helpers import T0


def _verdict(direction, lane, start, fused, error=0.0, deep=False):
    return fusion.fuse(("cam", direction, lane, start), TimeOfDayGroup.NIGHT, error, deep, fused, False)


def test_dirty_spans_cover_the_whole_direction():
    truth = [GroundTruthInterval(2, T0 + 900 + 60, "ForeignObject", "cam")]
    starts = {("cam", 1, T0), ("cam", 1, T0 + 900), ("cam", -1, T0 + 900)}
    assert pipeline.dirty_spans(truth, (), starts) == {("cam", 1, T0 + 900)}
    assert pipeline.dirty_spans((), [("cam", -1, -3, T0)], ()) == {("cam", -1, T0)}


def test_labels_from_truth_k_and_kinds():
    keys = [("cam", 1, 1, T0), ("cam", 1, 2, T0), ("cam", 1, 1, T0 + 900)]
    truth = [GroundTruthInterval(1, T0 + 30 * i, "LaneBlockage") for i in range(3)]
    truth.append(GroundTruthInterval(2, T0, "CameraShift"))
    ls = pipeline.labels_from_truth(keys, truth, k=3)
    assert ls.labels == {keys[0]: 1, keys[1]: 0, keys[2]: 0}
    assert ls.kinds[keys[0]] == "LaneBlockage" and ls.kinds[keys[2]] is None
    # lane 2 grazes an anomaly in the same span, so it is neither positive nor eligible as normal
    assert ls.clean == {keys[2]}


def test_balanced_evaluation():
    verdicts = [_verdict(1, 1, T0, True, 0.9)]
    verdicts += [_verdict(-1, -1, T0 + 900 * i, i == 1, 0.1 * i) for i in range(1, 8)]
    truth = [GroundTruthInterval(1, T0 + 30 * i, "LaneBlockage") for i in range(30)]
    ev = pipeline.evaluate(verdicts, ("truth", truth), seed=0)
    assert len(ev.keys) == 2
    again = pipeline.evaluate(verdicts, ("truth", truth), seed=0)
    assert ev.keys == again.keys
    full = pipeline.evaluate(verdicts, ("truth", truth), balance=False)
    assert len(full.keys) == 8 and full.report.counts.fp == 1
    assert "deep_error_auc:" in full.as_text()


def test_window_label_key_mismatch():
    verdicts = [_verdict(1, 1, T0, True)]
    with pytest.raises(ValueError, match="no verdict"):
        pipeline.evaluate(verdicts, ("windows", {("cam", 1, 1, T0 + 900): (1, None)}))


def test_label_source_sniffing(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="unrecognised header"):
        pipeline.load_label_source(p)
    synth.save_ground_truth(p, [GroundTruthInterval(1, T0, "ForeignObject")])
    assert pipeline.load_label_source(p)[0] == "truth"
    pipeline.write_window_labels(p, {("cam", 1, 1, T0): 1}, {("cam", 1, 1, T0): "ForeignObject"})
    kind, payload = pipeline.load_label_source(p)
    assert kind == "windows" and payload == {("cam", 1, 1, T0): (1, "ForeignObject")}


def test_train_rejects_tiny_data():
    samples, _, _ = synth.generate(synth.ScenarioConfig(hours=0.2, injections=[]))
    with pytest.raises(ValueError, match="windows"):
        pipeline.train(samples)
