from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np
import torch

from models.box import BoundingBox
from models.sequence import EvalReport
from services.iou_net import geometric_iou

# 重叠率阈值 0:0.01:1
THRESHOLDS = np.linspace(0.0, 1.0, 101)


def op_curve(ious: Seq[float], thresholds: np.ndarray = THRESHOLDS) -> np.ndarray:
    """OP_T：IoU 大于阈值 T 的帧所占百分比"""
    values = np.asarray(ious, dtype=np.float64)
    if values.size == 0:
        raise ValueError("op_curve: empty IoU list")
    if np.any(values < 0) or np.any(values > 1):
        raise ValueError("op_curve: IoU values must lie in [0, 1]")
    return 100.0 * (values[None, :] > thresholds[:, None]).mean(axis=1)


def auc(curve: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> float:
    """成功率曲线下面积（梯形积分），单位百分比"""
    return float(torch.trapezoid(torch.as_tensor(curve, dtype=torch.float64),
                                 torch.as_tensor(thresholds, dtype=torch.float64)))


def op_at(ious: Seq[float], threshold: float) -> float:
    return float(100.0 * (np.asarray(ious, dtype=np.float64) > threshold).mean())


def precision_at(center_errors: Seq[float], threshold: float = 20.0) -> float:
    """中心误差不超过阈值（像素）的帧所占百分比"""
    errors = np.asarray(center_errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("precision_at: empty error list")
    if np.any(errors < 0):
        raise ValueError("precision_at: center errors must be non-negative")
    return float(100.0 * (errors <= threshold).mean())


def normalized_errors(predictions: Seq[BoundingBox], ground_truth: Seq[BoundingBox]) -> List[float]:
    """以真值宽高归一化的中心误差"""
    return [float(np.hypot((p.cx - g.cx) / g.w, (p.cy - g.cy) / g.h)) for p, g in zip(predictions, ground_truth)]


def normalized_precision(predictions: Seq[BoundingBox], ground_truth: Seq[BoundingBox],
                         threshold: float = 0.2) -> float:
    return precision_at(normalized_errors(predictions, ground_truth), threshold)


def evaluate_trajectory(
    name: str,
    predictions: Seq[BoundingBox],
    ground_truth: Seq[BoundingBox],
    precision_threshold: float = 20.0,
    norm_threshold: float = 0.2,
    frame_times: Optional[Seq[float]] = None,
) -> EvalReport:
    """逐帧比较预测框与真值框，生成评测报告

    预测帧数少于真值时（序列中途失败），缺失帧的 IoU 记为 0。
    """
    if not ground_truth:
        raise ValueError(f"{name}: empty ground truth")
    n = min(len(predictions), len(ground_truth))
    ious = [geometric_iou(p, g) for p, g in zip(predictions[:n], ground_truth[:n])]
    ious += [0.0] * (len(ground_truth) - n)
    errors = [p.center_distance(g) for p, g in zip(predictions[:n], ground_truth[:n])]
    norm = normalized_errors(predictions[:n], ground_truth[:n])
    # 缺失帧的中心误差视为无穷大
    errors += [float("inf")] * (len(ground_truth) - n)
    norm += [float("inf")] * (len(ground_truth) - n)
    curve = op_curve(ious)
    return EvalReport(
        name=name,
        ious=ious,
        thresholds=THRESHOLDS.tolist(),
        op=curve.tolist(),
        auc=min(100.0, max(0.0, auc(curve))),
        op50=op_at(ious, 0.5),
        op75=op_at(ious, 0.75),
        precision=precision_at(errors, precision_threshold),
        norm_precision=precision_at(norm, norm_threshold),
        mean_frame_time=float(np.mean(frame_times)) if frame_times else 0.0,
    )


def merge_reports(name: str, reports: Seq[EvalReport]) -> EvalReport:
    """把多个序列的逐帧 IoU 合并为整体报告（按序列名排序后聚合）"""
    if not reports:
        raise ValueError("merge_reports: no reports")
    ordered = sorted(reports, key=lambda r: r.name)
    ious = [v for r in ordered for v in r.ious]
    frames = [len(r.ious) for r in ordered]
    curve = op_curve(ious)

    def weighted(attr: str) -> float:
        return float(np.average([getattr(r, attr) for r in ordered], weights=frames))

    return EvalReport(
        name=name,
        ious=ious,
        thresholds=THRESHOLDS.tolist(),
        op=curve.tolist(),
        auc=min(100.0, max(0.0, auc(curve))),
        op50=op_at(ious, 0.5),
        op75=op_at(ious, 0.75),
        precision=weighted("precision"),
        norm_precision=weighted("norm_precision"),
        mean_frame_time=weighted("mean_frame_time"),
    )


def curve_rows(report: EvalReport) -> List[Tuple[float, float]]:
    """成功率曲线 (threshold, op) 行，用于导出 CSV"""
    return list(zip(report.thresholds, report.op))
