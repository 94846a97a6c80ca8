import numpy as np
import pytest

from models.box import BoundingBox
from services.metrics import (
    THRESHOLDS,
    auc,
    curve_rows,
    evaluate_trajectory,
    merge_reports,
    op_at,
    op_curve,
    precision_at,
)


def test_op_and_auc_examples():
    """测试 IoU 全为 1 时 AUC 约为 100，全为 0.5 时约为 50，全为 0 时为 0"""
    ones = op_curve([1.0, 1.0, 1.0])
    assert np.all(ones[:-1] == 100.0)
    assert auc(ones) == pytest.approx(100.0, abs=0.5)
    assert auc(op_curve([0.5] * 4)) == pytest.approx(50.0, abs=0.5)
    assert op_at([1.0, 1.0], 0.5) == 100.0
    zeros = op_curve([0.0, 0.0])
    assert auc(zeros) == 0.0
    assert op_at([0.0, 0.0], 0.5) == 0.0


def test_op_counts_strictly_greater():
    """测试 OP_T 统计 IoU 严格大于 T 的帧"""
    ious = [0.5, 0.75, 0.9, 0.2]
    assert op_at(ious, 0.5) == 50.0
    assert op_at(ious, 0.75) == 25.0
    curve = op_curve(ious)
    assert curve[0] == 100.0 and curve[-1] == 0.0
    assert np.all(np.diff(curve) <= 0)


def test_auc_approximates_mean_iou():
    """测试 AUC 约等于平均 IoU（百分比）"""
    rng = np.random.default_rng(0)
    ious = rng.uniform(0, 1, size=500)
    assert auc(op_curve(ious)) == pytest.approx(100 * ious.mean(), abs=1.0)


def test_precision_at():
    """测试中心误差 {10, 30} 在阈值 20 下精度为 50%"""
    assert precision_at([10.0, 30.0], 20.0) == 50.0
    with pytest.raises(ValueError):
        precision_at([], 20.0)
    with pytest.raises(ValueError):
        op_curve([1.5])


def test_evaluate_trajectory_pads_missing_frames():
    """测试预测帧少于真值时缺失帧 IoU 记为 0"""
    gt = [BoundingBox(cx=10, cy=10, w=4, h=4)] * 4
    report = evaluate_trajectory("seq", gt[:2], gt)
    assert report.ious == [1.0, 1.0, 0.0, 0.0]
    assert report.op50 == 50.0
    assert report.precision == 50.0
    assert len(curve_rows(report)) == len(THRESHOLDS)


def test_merge_reports_pools_frames():
    """测试合并报告按帧数加权汇总，与报告顺序无关"""
    gt = [BoundingBox(cx=10, cy=10, w=4, h=4)] * 3
    shifted = [BoundingBox(cx=30, cy=10, w=4, h=4)] * 3
    a = evaluate_trajectory("a", gt, gt)
    b = evaluate_trajectory("b", shifted, gt)
    merged = merge_reports("all", [b, a])
    assert merged.ious == a.ious + b.ious
    assert merged.op50 == 50.0
    assert merged.precision == 50.0
    assert merge_reports("all", [a, b]).auc == merged.auc
