"""Confusion matrix accumulation and the evaluation measures."""

import numpy as np
import pytest

from fusionlane.metrics import ConfusionMatrix, write_report_csv


def test_perfect_prediction_hits_diagonal_only():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 7, size=(10, 10))
    cm = ConfusionMatrix().accumulate(labels, labels)
    assert cm.counts.sum() == 100
    assert np.all(cm.counts == np.diag(np.diag(cm.counts)))
    assert cm.pixel_accuracy() == 1.0
    assert cm.miou() == 1.0


def test_accumulation_is_commutative():
    rng = np.random.default_rng(1)
    pred_a, gt_a = rng.integers(0, 7, (2, 8, 8))
    pred_b, gt_b = rng.integers(0, 7, (2, 8, 8))
    ab = ConfusionMatrix().accumulate(pred_a, gt_a).accumulate(pred_b, gt_b)
    ba = ConfusionMatrix().accumulate(pred_b, gt_b).accumulate(pred_a, gt_a)
    assert np.array_equal(ab.counts, ba.counts)


def test_counts_match_per_pixel_loop_oracle():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 7, size=(10, 10))
    gt = rng.integers(0, 7, size=(10, 10))
    cm = ConfusionMatrix().accumulate(pred, gt)
    expected = np.zeros((7, 7), np.int64)
    for r in range(10):
        for c in range(10):
            expected[gt[r, c], pred[r, c]] += 1
    assert np.array_equal(cm.counts, expected)


def test_two_class_hand_values():
    cm = ConfusionMatrix(num_classes=2)
    cm.counts = np.array([[3, 1], [2, 4]], np.int64)
    assert cm.pixel_accuracy() == pytest.approx(0.7, abs=1e-9)
    iou = cm.iou_per_class()
    assert iou[0] == pytest.approx(0.5, abs=1e-9)
    assert iou[1] == pytest.approx(4.0 / 7.0, abs=1e-9)
    assert cm.miou() == pytest.approx((0.5 + 4.0 / 7.0) / 2.0, abs=1e-9)


def test_uniform_random_predictions_approach_chance_accuracy():
    rng = np.random.default_rng(3)
    n = 100_000
    k = 4
    gt = np.repeat(np.arange(k), n // k)
    pred = rng.integers(0, k, size=n)
    cm = ConfusionMatrix(num_classes=k).accumulate(pred, gt)
    assert abs(cm.pixel_accuracy() - 1.0 / k) < 0.05


def test_single_class_degenerate_case():
    cm = ConfusionMatrix().accumulate(np.zeros((5, 5), np.int64), np.zeros((5, 5), np.int64))
    iou = cm.iou_per_class()
    assert iou[0] == 1.0
    assert np.isnan(iou[1:]).all()
    assert cm.miou() == 1.0


def test_relabeling_permutes_ious_and_preserves_miou():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 7, size=(40, 40))
    gt = rng.integers(0, 7, size=(40, 40))
    base = ConfusionMatrix().accumulate(pred, gt)
    perm = rng.permutation(7)
    permuted = ConfusionMatrix().accumulate(perm[pred], perm[gt])
    iou_base = base.iou_per_class()
    iou_perm = permuted.iou_per_class()
    assert np.allclose(iou_perm[perm], iou_base, equal_nan=True)
    assert permuted.miou() == pytest.approx(base.miou(), abs=1e-12)


def test_high_pixel_accuracy_can_coexist_with_low_miou():
    # dominant background diagonal, rare classes mostly misread as background
    cm = ConfusionMatrix()
    cm.counts[0, 0] = 10_000
    for cls in range(1, 7):
        cm.counts[cls, 0] = 90
        cm.counts[cls, cls] = 10
    assert cm.pixel_accuracy() > 0.9
    assert cm.miou() < 0.4


def test_shape_mismatch_and_range_errors():
    cm = ConfusionMatrix()
    with pytest.raises(ValueError, match="shape"):
        cm.accumulate(np.zeros((2, 2), np.int64), np.zeros((2, 3), np.int64))
    with pytest.raises(ValueError, match="outside"):
        cm.accumulate(np.full((2, 2), 9, np.int64), np.zeros((2, 2), np.int64))


def test_empty_matrix_rejected():
    with pytest.raises(ValueError, match="empty"):
        ConfusionMatrix().pixel_accuracy()
    with pytest.raises(ValueError, match="empty"):
        ConfusionMatrix().miou()


def test_merge_is_elementwise_sum():
    rng = np.random.default_rng(5)
    a = ConfusionMatrix().accumulate(*rng.integers(0, 7, (2, 6, 6)))
    b = ConfusionMatrix().accumulate(*rng.integers(0, 7, (2, 6, 6)))
    merged = ConfusionMatrix()
    merged.counts = a.counts.copy()
    merged.merge(b)
    assert np.array_equal(merged.counts, a.counts + b.counts)


def test_report_csv_layout(tmp_path):
    cm = ConfusionMatrix()
    cm.counts[0, 0] = 50
    cm.counts[1, 1] = 25
    cm.counts[1, 0] = 25
    path = tmp_path / "report.csv"
    write_report_csv(cm, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,iou"
    assert lines[1].startswith("Background,")
    assert lines[-2].startswith("MIOU,")
    assert lines[-1].startswith("PixelAccuracy,")
    assert len(lines) == 1 + 7 + 2
