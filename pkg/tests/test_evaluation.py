import json

import numpy as np
import pytest

from udaseg.evaluation import (ConfusionMatrix, EvalReport, accumulate, format_table, iou,
                               render_report)

IGN = 255


def tally_oracle(pred, gt, n):
    m = np.zeros((n, n), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != IGN:
            m[g, p] += 1
    return m


def test_perfect_diagonal(rng):
    gt = rng.integers(0, 4, (8, 8))
    cm = accumulate(ConfusionMatrix.empty(4), gt, gt)
    assert np.array_equal(cm.counts, np.diag(np.bincount(gt.ravel(), minlength=4)))
    r = iou(cm)
    assert r.miou == 1.0
    assert all(v in (1.0, None) for v in r.per_class_iou)


def test_all_ignored():
    cm = accumulate(ConfusionMatrix.empty(3), np.zeros((5, 6), int), np.full((5, 6), IGN))
    assert cm.counts.sum() == 0 and cm.ignored == 30


def test_counting_oracle(rng):
    for _ in range(20):
        gt = rng.integers(0, 5, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGN
        pred = rng.integers(0, 5, (8, 8))
        cm = accumulate(ConfusionMatrix.empty(5), pred, gt)
        assert np.array_equal(cm.counts, tally_oracle(pred, gt, 5))
        assert cm.counts.sum() + cm.ignored == 64


def test_errors():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(3), np.zeros((2, 2), int), np.zeros((3, 3), int))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(3), np.full((2, 2), IGN), np.zeros((2, 2), int))


def test_disjoint_prediction():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[1, 1], [2, 2]])
    r = iou(accumulate(ConfusionMatrix.empty(3), pred, gt))
    assert r.per_class_iou == [0.0, 0.0, 0.0]


def test_two_class_hand_case():
    r = iou(ConfusionMatrix(np.array([[3, 1], [1, 3]])))
    assert r.per_class_iou == [3 / 5, 3 / 5]
    assert r.miou == pytest.approx(0.6, abs=1e-15)


def test_undefined_classes_excluded():
    r = iou(ConfusionMatrix(np.array([[2, 0, 0], [0, 0, 0], [0, 0, 1]])))
    assert r.per_class_iou[1] is None
    assert r.miou == 1.0


def test_set_oracle_100_labelings():
    rng = np.random.default_rng(42)
    for _ in range(100):
        gt = rng.integers(0, 4, (8, 8))
        pred = rng.integers(0, 4, (8, 8))
        r = iou(accumulate(ConfusionMatrix.empty(4), pred, gt))
        for c in range(4):
            g = {(i, j) for i in range(8) for j in range(8) if gt[i, j] == c}
            p = {(i, j) for i in range(8) for j in range(8) if pred[i, j] == c}
            union = g | p
            want = len(g & p) / len(union) if union else None
            assert r.per_class_iou[c] == want


def test_order_independent_and_scale_invariant(rng):
    pairs = [(rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))) for _ in range(10)]
    cm1 = ConfusionMatrix.empty(4)
    for p, g in pairs:
        cm1 = accumulate(cm1, p, g)
    cm2 = ConfusionMatrix.empty(4)
    for k in rng.permutation(10):
        cm2 = accumulate(cm2, *pairs[k])
    assert np.array_equal(cm1.counts, cm2.counts)
    r1 = iou(cm1)
    r3 = iou(ConfusionMatrix(cm1.counts * 7))
    assert r1.per_class_iou == pytest.approx(r3.per_class_iou, abs=1e-15)


def rep(miou, n=3):
    return EvalReport([miou] * n, miou, 1, [f"c{i}" for i in range(n)])


def test_single_report_no_delta(tmp_path):
    files = render_report({"full": rep(0.5)}, tmp_path, baseline="full")
    text = files["table"].read_text()
    assert "delta" not in text
    assert files["plot"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ablation_table_shape(tmp_path):
    reports = {"full": rep(0.6), "no-mask": rep(0.5), "no-prior": rep(0.55), "no-contrastive": rep(0.58)}
    render_report(reports, tmp_path, baseline="no-prior", reference="full")
    lines = (tmp_path / "report.txt").read_text().splitlines()
    header = [c.strip() for c in lines[0].split("|")]
    assert header[:4] == ["Component", "mIoU", "delta_no-prior", "delta_full"]
    body = lines[2:]
    assert [l.split("|")[0].strip() for l in body] == list(reports)
    full_row = [c.strip() for c in body[0].split("|")]
    assert full_row[3] == "+0.00"
    doc = json.loads((tmp_path / "report.json").read_text())
    assert list(doc["reports"]) == list(reports)


def test_identical_reports_zero_delta():
    text = format_table({"a": rep(0.4), "b": rep(0.4)}, baseline="a")
    for line in text.splitlines()[2:]:
        assert line.split("|")[2].strip() == "+0.00"


def test_render_deterministic(tmp_path):
    reports = {"a": rep(0.4), "b": rep(0.7)}
    f1 = render_report(reports, tmp_path / "1", baseline="a")
    f2 = render_report(reports, tmp_path / "2", baseline="a")
    for k in f1:
        assert f1[k].read_bytes() == f2[k].read_bytes()


def test_hidden_baseline_feeds_delta_without_row():
    reports = {"full": rep(0.6), "no-mask": rep(0.5), "baseline": rep(0.55)}
    text = format_table(reports, baseline="baseline", reference="full",
                        delta_names={"full": "ours"}, hide=["baseline"])
    lines = text.splitlines()
    header = [c.strip() for c in lines[0].split("|")]
    assert header[:4] == ["Component", "mIoU", "delta_baseline", "delta_ours"]
    rows = [[c.strip() for c in l.split("|")] for l in lines[2:]]
    assert [r[0] for r in rows] == ["full", "no-mask"]
    assert rows[0][2:4] == ["+5.00", "+0.00"]
    assert rows[1][2:4] == ["-5.00", "-10.00"]
