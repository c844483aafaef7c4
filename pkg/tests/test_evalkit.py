import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from styleless.evalkit import (
    ConfusionMatrix,
    ExperimentConfig,
    MetricsReport,
    evaluate,
    matched_widths,
    miou,
    normalized_content_loss,
    run_experiment,
    write_table,
)
from styleless.model import ToySegNet, count_parameters


def _oracle(preds, labels, classes):
    """Per-pixel brute force: count TP/FP/FN for each class with Python loops."""
    per = {}
    for c in classes:
        tp = fp = fn = 0
        for p, t in zip(np.ravel(preds), np.ravel(labels)):
            if t == 255:
                continue
            tp += p == c and t == c
            fp += p == c and t != c
            fn += p != c and t == c
        per[c] = None if tp + fp + fn == 0 else tp / (tp + fp + fn)
    vals = [v for v in per.values() if v is not None]
    return per, (float(np.mean(vals)) if vals else float("nan"))


def test_miou_examples():
    labels = np.array([[1, 1], [0, 0]])
    per, _ = miou(np.array([[1, 0], [0, 0]]), labels, classes=(1,))
    assert per[1] == 0.5
    per, m = miou(labels, labels, classes=(0, 1))
    assert per == {0: 1.0, 1: 1.0} and m == 1.0
    half = np.zeros((4, 4), int)
    half[:2] = 1
    per, _ = miou(np.zeros((4, 4), int), half, classes=(1,))
    assert per[1] == 0.0
    with pytest.raises(ValueError, match="shape"):
        miou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_absent_class_is_excluded():
    per, m = miou(np.ones((2, 2), int), np.ones((2, 2), int))
    assert per[2] is None and per[3] is None and m == 1.0


def test_exhaustive_small_instances():
    # every 2x2 labelling over 3 classes against every 2x2 prediction
    for lab in itertools.product(range(3), repeat=4):
        for pred in itertools.product(range(3), repeat=4):
            got = miou(np.array(pred).reshape(2, 2), np.array(lab).reshape(2, 2), classes=(0, 1, 2), n_classes=3)
            want = _oracle(pred, lab, (0, 1, 2))
            assert got[0] == want[0]
            assert got[1] == pytest.approx(want[1], nan_ok=True, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_random_instances_up_to_8x8(h, w, seed):
    r = np.random.default_rng(seed)
    lab = r.integers(0, 4, (h, w))
    lab[r.uniform(size=(h, w)) < 0.1] = 255
    pred = r.integers(0, 4, (h, w))
    got = miou(pred, lab, classes=(0, 1, 2, 3))
    want = _oracle(pred, lab, (0, 1, 2, 3))
    assert got[0] == want[0]
    assert got[1] == pytest.approx(want[1], nan_ok=True, abs=1e-15)


def test_confusion_is_global_not_per_image():
    cm = ConfusionMatrix(2)
    cm.add(np.array([[1, 1]]), np.array([[1, 0]]))
    cm.add(np.array([[1, 1, 1, 1]]), np.array([[1, 1, 1, 1]]))
    assert cm.iou()[1] == pytest.approx(5 / 6)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=st.floats(0, 1)), st.integers(0, 10**6))
def test_report_json_roundtrip(ious, seed):
    rep = MetricsReport({"background": float(ious[0]), "road": float(ious[1]), "vehicle": None,
                         "vulnerable": float(ious[3])}, float(ious[1:].mean()), "test/haze-3",
                        {"kind": "haze", "severity": 3, "seed": 0}, "abc", seed, "styleless", 1.5)
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back == rep and back.wall_clock == rep.wall_clock


def test_evaluate_is_deterministic():
    from styleless.data import make_dataset
    net = ToySegNet(seed=3)
    ds = make_dataset(4, 0, "test")
    a, b = evaluate(net, ds, "h", 1), evaluate(net, ds, "h", 1)
    assert a.to_json(timing=False) == b.to_json(timing=False)
    assert 0 <= a.miou <= 1 and set(a.iou) == {"background", "road", "vehicle", "vulnerable"}


def test_matched_widths():
    target = 142_188
    w = matched_widths(target)
    assert abs(count_parameters(ToySegNet(w)) - target) <= abs(count_parameters(ToySegNet((16, 32, 32, 64))) - target)


def test_normalized_content_loss_is_scale_free():
    r = np.random.default_rng(0)
    a, b = [r.normal(size=(1, 4, 5, 5))], [r.normal(size=(1, 4, 5, 5))]
    assert normalized_content_loss(a, a) == 0.0
    assert normalized_content_loss(a, b) == pytest.approx(normalized_content_loss([3 * a[0]], [3 * b[0]]))


def test_write_table(tmp_path):
    f = write_table({"baseline": {"test/clean": 50.0}, "styleless": {"test/clean": 51.25}},
                    ["test/clean"], tmp_path / "t.csv")
    assert f.read_text().splitlines() == ["model,test/clean", "baseline,50.00", "styleless,51.25"]


def test_run_experiment_bundle_shape(tmp_path):
    cfg = ExperimentConfig(n_train=8, n_test=2, epochs=1, grids=True)
    res = run_experiment("baseline-vs-styleless", [0], cfg, out=tmp_path, log=lambda *_: None)
    assert len(res.reports) == 2 * (1 + 5 * 5)
    assert (tmp_path / "baseline-vs-styleless_table.csv").is_file()
    assert (tmp_path / "grids" / "baseline-vs-styleless_seed0.png").is_file()
    assert len(list((tmp_path / "reports").rglob("*.json"))) == 52
    # a second run reuses the cached checkpoints and reproduces every report
    again = run_experiment("baseline-vs-styleless", [0], cfg, out=tmp_path, log=lambda *_: None)
    assert [r.to_json(timing=False) for r in again.reports] == [r.to_json(timing=False) for r in res.reports]


def test_run_experiment_errors(tmp_path):
    with pytest.raises(ValueError):
        run_experiment("nope", [0])
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(train_data=str(tmp_path / "missing"))
