import math
from typing import List, Optional, Sequence as Seq

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict

from models.box import BoundingBox
from models.errors import ConvergenceError
from models.sequence import Sequence
from models.tracking import IoUTrainingConfig, TrainingHistory
from services.autodiff import Tape
from services.backbone import Backbone
from services.iou_net import IoUNet, generate_candidates, geometric_iou, paired_iou
from services.optim import AdamState, adam
from services.patches import extract_patch


class PairBatch(BaseModel):
    """一批 (参考图像块 + 参考框, 测试图像块 + 真值框) 训练对，框为图像块像素坐标"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    ref_images: torch.Tensor
    ref_boxes: torch.Tensor
    test_images: torch.Tensor
    test_boxes: torch.Tensor

    def __len__(self) -> int:
        return int(self.ref_boxes.shape[0])


class SyntheticPairSampler:
    """从序列中采样训练对

    参考帧与测试帧间隔不超过 max_gap；测试图像块以扰动后的位置和尺度裁剪以模拟
    跟踪误差；水平翻转与逐通道颜色抖动对一对图像块同时施加。
    """

    def __init__(self, sequences: Seq[Sequence], config: IoUTrainingConfig):
        if not sequences:
            raise ValueError("SyntheticPairSampler needs at least one sequence")
        self.sequences = list(sequences)
        self.config = config

    def _pair(self, rng: np.random.Generator):
        cfg = self.config
        seq = self.sequences[rng.integers(len(self.sequences))]
        i = int(rng.integers(len(seq)))
        lo, hi = max(0, i - cfg.max_gap), min(len(seq) - 1, i + cfg.max_gap)
        j = int(rng.integers(lo, hi + 1))

        gt_ref, gt_test = seq.ground_truth[i], seq.ground_truth[j]
        ref_patch, ref_tf = extract_patch(seq.frame(i), gt_ref, cfg.area_factor, cfg.patch_size)
        size = gt_test.size
        jitter = rng.normal(size=2) * cfg.center_jitter * size
        factor = math.exp(rng.normal() * cfg.scale_jitter)
        crop_box = BoundingBox(cx=gt_test.cx + jitter[0], cy=gt_test.cy + jitter[1],
                               w=gt_test.w * factor, h=gt_test.h * factor)
        test_patch, test_tf = extract_patch(seq.frame(j), crop_box, cfg.area_factor, cfg.patch_size)
        ref_box = ref_tf.frame_to_patch(gt_ref).to_tensor(ref_patch.dtype)
        test_box = test_tf.frame_to_patch(gt_test).to_tensor(test_patch.dtype)

        if rng.random() < 0.5:
            ref_patch, test_patch = ref_patch.flip(1), test_patch.flip(1)
            ref_box[0] = cfg.patch_size - ref_box[0]
            test_box[0] = cfg.patch_size - test_box[0]
        gains = torch.as_tensor(rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=3), dtype=ref_patch.dtype)
        ref_patch = (ref_patch * gains).clamp(0.0, 1.0)
        test_patch = (test_patch * gains).clamp(0.0, 1.0)
        return ref_patch, ref_box, test_patch, test_box

    def batch(self, n: int, rng: np.random.Generator) -> PairBatch:
        pairs = [self._pair(rng) for _ in range(n)]
        return PairBatch(
            ref_images=torch.stack([p[0] for p in pairs]),
            ref_boxes=torch.stack([p[1] for p in pairs]),
            test_images=torch.stack([p[2] for p in pairs]),
            test_boxes=torch.stack([p[3] for p in pairs]),
        )


def sample_candidates(gt_boxes: torch.Tensor, n: int, min_iou: float, rng: np.random.Generator) -> torch.Tensor:
    """每个真值框生成 n 个候选框，返回 N×n×4"""
    sets = [generate_candidates(BoundingBox.from_tensor(g), n, min_iou, rng) for g in gt_boxes]
    return torch.stack([s.to_tensor(gt_boxes.dtype) for s in sets])


def iou_targets(candidates: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """IoU 回归目标，从 [0, 1] 映射到 [−1, 1]"""
    return 2.0 * paired_iou(candidates, gt_boxes) - 1.0


class ValidationSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pairs: PairBatch
    candidates: torch.Tensor
    ious: torch.Tensor


def build_validation_set(sampler: SyntheticPairSampler, config: IoUTrainingConfig) -> ValidationSet:
    rng = np.random.default_rng([config.seed, 1])
    pairs = sampler.batch(config.val_pairs, rng)
    candidates = sample_candidates(pairs.test_boxes, config.candidates, config.min_iou, rng)
    return ValidationSet(pairs=pairs, candidates=candidates, ious=paired_iou(candidates, pairs.test_boxes))


def evaluate_mse(net: IoUNet, backbone: Backbone, val: ValidationSet, chunk: int = 32) -> float:
    """验证集 MSE（[0, 1] 尺度：预测值 (s + 1)/2 与真实 IoU 比较）"""
    was_training = net.training
    net.eval()
    errors = []
    with torch.no_grad():
        for start in range(0, len(val.pairs), chunk):
            sl = slice(start, start + chunk)
            ref_feats = backbone(val.pairs.ref_images[sl])
            test_feats = backbone(val.pairs.test_images[sl])
            pred = net(ref_feats, val.pairs.ref_boxes[sl], test_feats, val.candidates[sl])
            errors.append((((pred + 1.0) / 2.0 - val.ious[sl]) ** 2).reshape(-1))
    net.train(was_training)
    return float(torch.cat(errors).mean())


def constant_baseline_mse(val: ValidationSet) -> float:
    """始终预测平均 IoU 的常数预测器的 MSE"""
    return float(((val.ious - val.ious.mean()) ** 2).mean())


def train_offline(
    net: IoUNet,
    backbone: Backbone,
    sampler: SyntheticPairSampler,
    config: IoUTrainingConfig,
    val: Optional[ValidationSet] = None,
) -> TrainingHistory:
    """用 ADAM 以 MSE 损失离线训练 IoU 网络，骨干网络冻结

    Returns:
        每个 epoch 的 (epoch, train_mse, val_mse) 与常数预测基线
    """
    rng = np.random.default_rng([config.seed, 0])
    val = val or build_validation_set(sampler, config)
    params = [p for p in net.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    tape = Tape("iou-training")
    history = TrainingHistory(baseline_mse=constant_baseline_mse(val))

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        net.train()
        losses: List[float] = []
        for batch_index in range(config.batches_per_epoch):
            pairs = sampler.batch(config.batch, rng)
            candidates = sample_candidates(pairs.test_boxes, config.candidates, config.min_iou, rng)
            targets = iou_targets(candidates, pairs.test_boxes)
            with torch.no_grad():
                ref_feats = backbone(pairs.ref_images)
                test_feats = backbone(pairs.test_images)
            pred = net(ref_feats, pairs.ref_boxes, test_feats, candidates)
            loss = ((pred - targets) ** 2).mean()
            if not math.isfinite(float(loss)):
                logger.error(f"Non-finite training loss at epoch {epoch}, batch {batch_index}")
                raise ConvergenceError(f"non-finite loss at epoch {epoch}, batch {batch_index}", iteration=epoch)
            grads = tape.backprop(loss, params)
            adam(params, grads, state, lr=lr)
            losses.append(float(loss) / 4.0)
        val_mse = evaluate_mse(net, backbone, val)
        history.rows.append((epoch, float(np.mean(losses)), val_mse))
        logger.info(f"[{net.kind}] epoch {epoch}: lr {lr:.2e}, train MSE {np.mean(losses):.4f}, "
                    f"val MSE {val_mse:.4f} (constant baseline {history.baseline_mse:.4f})")
    net.eval()
    return history


def perturbed_boxes(gt: BoundingBox, n: int, iou_range=(0.3, 0.7),
                    rng: Optional[np.random.Generator] = None) -> List[BoundingBox]:
    """生成与真值 IoU 落在给定区间内的扰动框（用于评估梯度上升的效果）"""
    rng = rng or np.random.default_rng(0)
    lo, hi = iou_range
    out = []
    while len(out) < n:
        for box in generate_candidates(gt, n, min_iou=lo, seed=rng).boxes:
            if geometric_iou(box, gt) <= hi and len(out) < n:
                out.append(box)
    return out
