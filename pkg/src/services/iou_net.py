import math
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger
from tenacity import RetryError, Retrying, retry_if_result, stop_after_attempt
from torch import nn
from torchvision.ops import box_convert, box_iou

from models.box import BoundingBox
from models.errors import CandidateError, DegenerateBoxError
from models.features import CandidateSet, ModulationVector
from services.autodiff import batchnorm, concat, conv2d, linear, modulate, relu
from services.backbone import FEATURE_STRIDES
from services.prpool import pool_regions

IoUKind = Literal["modulation", "concatenation", "siamese", "baseline", "block3", "block4"]
IOU_KINDS = ("modulation", "concatenation", "siamese", "baseline", "block3", "block4")

# 候选框噪声尺度（相对目标宽高）
SIGMA_FACTORS = (0.01, 0.05, 0.1, 0.2, 0.3)
CANDIDATE_ATTEMPTS = 1000


def _kaiming(fan_out: int, fan_in: int, *trailing: int) -> torch.Tensor:
    t = torch.empty(fan_out, fan_in, *trailing, dtype=torch.get_default_dtype())
    nn.init.kaiming_normal_(t, nonlinearity="relu")
    return t


class BatchNorm(nn.Module):
    """按通道（最后一维）的批归一化层"""

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return batchnorm(x, self.scale, self.shift, self.running_mean, self.running_var,
                         mode="train" if self.training else "eval", momentum=self.momentum)


class ConvBNReLU(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        # k×k×Cin×Cout
        self.weight = nn.Parameter(_kaiming(out_channels, in_channels, kernel, kernel).permute(2, 3, 1, 0).contiguous())
        self.bn = BatchNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return relu(self.bn(conv2d(x, self.weight, padding="same")))


class Dense(nn.Module):
    """全连接层；norm=True 时后接 BatchNorm + ReLU，否则为带偏置的线性输出层"""

    def __init__(self, in_features: int, out_features: int, norm: bool = True):
        super().__init__()
        self.weight = nn.Parameter(_kaiming(out_features, in_features).t().contiguous())
        self.bn = BatchNorm(out_features) if norm else None
        self.bias = None if norm else nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = linear(x, self.weight, self.bias)
        return relu(self.bn(out)) if self.bn is not None else out


class IoUNet(nn.Module):
    """基于调制的 IoU 预测网络及其消融变体

    - modulation：参考分支（卷积 → PrPool → 全连接）输出非负调制向量，与测试分支
      （两层卷积 → PrPool）池化特征逐通道相乘，两特征块结果拼接后送入预测器 g
    - concatenation：两分支共享卷积，参考与测试特征拼接后送入 g
    - siamese：两分支共享卷积，各自经过全连接后做内积
    - baseline：去掉参考分支
    - block3 / block4：只使用单个特征块的调制网络
    所有卷积与全连接层（输出层除外）后接 BatchNorm + ReLU。
    """

    def __init__(
        self,
        kind: str = "modulation",
        in_channels: Optional[Dict[str, int]] = None,
        dz: int = 64,
        hidden: int = 256,
        ref_pool: int = 3,
        test_pool: int = 5,
        seed: int = 0,
    ):
        super().__init__()
        if kind not in IOU_KINDS:
            raise ValueError(f"Unknown IoU network kind '{kind}', expected one of {IOU_KINDS}")
        self.kind = kind
        self.in_channels = dict(in_channels or {"block3": 128, "block4": 256})
        self.blocks: List[str] = [kind] if kind in ("block3", "block4") else ["block3", "block4"]
        self.dz, self.hidden = dz, hidden
        self.ref_pool, self.test_pool = ref_pool, test_pool
        self.seed = seed

        ref_dim, test_dim = ref_pool * ref_pool * dz, test_pool * test_pool * dz
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.test_convs = nn.ModuleDict({
                b: nn.Sequential(ConvBNReLU(self.in_channels[b], dz), ConvBNReLU(dz, dz)) for b in self.blocks
            })
            self.ref_convs = nn.ModuleDict()
            self.ref_fc = nn.ModuleDict()
            if self.modulated:
                for b in self.blocks:
                    self.ref_convs[b] = ConvBNReLU(self.in_channels[b], dz)
                    self.ref_fc[b] = Dense(ref_dim, dz)
            elif kind == "concatenation":
                for b in self.blocks:
                    self.ref_fc[b] = Dense(ref_dim, dz)
            elif kind == "siamese":
                for b in self.blocks:
                    self.ref_fc[b] = nn.Sequential(Dense(ref_dim, hidden), Dense(hidden, hidden),
                                                   Dense(hidden, hidden, norm=False))
            if kind == "siamese":
                self.reduce = nn.ModuleDict({
                    b: nn.Sequential(Dense(test_dim, hidden), Dense(hidden, hidden), Dense(hidden, hidden, norm=False))
                    for b in self.blocks
                })
                self.g = None
            else:
                self.reduce = nn.ModuleDict({b: Dense(test_dim, hidden) for b in self.blocks})
                per_block = hidden + (dz if kind == "concatenation" else 0)
                self.g = nn.Sequential(Dense(per_block * len(self.blocks), hidden), Dense(hidden, hidden),
                                       Dense(hidden, 1, norm=False))
        logger.info(f"IoU network '{kind}' built with {self.parameter_count()} trainable parameters")

    @property
    def modulated(self) -> bool:
        return self.kind in ("modulation", "block3", "block4")

    @property
    def shares_convs(self) -> bool:
        return self.kind in ("concatenation", "siamese")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def _pool(self, x: torch.Tensor, boxes: torch.Tensor, block: str, k: int) -> torch.Tensor:
        return pool_regions(x, boxes, k, spatial_scale=1.0 / FEATURE_STRIDES[block], offset=-0.5)

    def reference(self, feats: Dict[str, torch.Tensor], boxes: torch.Tensor) -> ModulationVector:
        """参考分支

        Args:
            feats: 参考图像块的骨干特征，每块 N×H×W×C
            boxes: 参考框 N×4（图像块像素坐标）

        Returns:
            每个特征块 N×E 的参考向量（baseline 为空）
        """
        if self.kind == "baseline":
            return ModulationVector(blocks={})
        n = boxes.shape[0]
        out = {}
        for b in self.blocks:
            x = self.test_convs[b](feats[b]) if self.shares_convs else self.ref_convs[b](feats[b])
            pooled = self._pool(x, boxes.reshape(n, 1, 4), b, self.ref_pool)
            out[b] = self.ref_fc[b](pooled.reshape(n, -1))
        return ModulationVector(blocks=out)

    def test_features(self, feats: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        """测试分支的卷积部分，与框无关，可在多次预测间复用"""
        return {b: self.test_convs[b](feats[b]) for b in self.blocks}

    def predict_from(self, ref: ModulationVector, test_feats: Dict[str, torch.Tensor],
                     boxes: torch.Tensor) -> torch.Tensor:
        """由测试分支卷积特征预测 N×P 个框的 IoU（归一化到 [−1, 1] 的回归值）"""
        n, p = boxes.shape[:2]
        parts = []
        for b in self.blocks:
            z = self._pool(test_feats[b], boxes, b, self.test_pool)
            if self.modulated:
                z = modulate(z, ref.blocks[b])
            t = self.reduce[b](z.reshape(n, p, -1))
            if self.kind == "concatenation":
                t = concat([t, ref.blocks[b].unsqueeze(1).expand(n, p, -1)], dim=-1)
            parts.append(t)
        fused = concat(parts, dim=-1)
        if self.kind == "siamese":
            r = concat([ref.blocks[b] for b in self.blocks], dim=-1).unsqueeze(1)
            return (fused * r).sum(-1) / math.sqrt(fused.shape[-1])
        return self.g(fused)[..., 0]

    def predict(self, ref: ModulationVector, feats: Dict[str, torch.Tensor], boxes: torch.Tensor) -> torch.Tensor:
        return self.predict_from(ref, self.test_features(feats), boxes)

    def forward(self, ref_feats: Dict[str, torch.Tensor], ref_boxes: torch.Tensor,
                test_feats: Dict[str, torch.Tensor], boxes: torch.Tensor) -> torch.Tensor:
        return self.predict(self.reference(ref_feats, ref_boxes), test_feats, boxes)


def _single(feats: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k: v.unsqueeze(0) if v.dim() == 3 else v for k, v in feats.items()}


def _box_tensor(box: Union[BoundingBox, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    t = box.to_tensor(dtype) if isinstance(box, BoundingBox) else box
    if bool((t.detach()[..., 2:] <= 1e-6).any()):
        raise DegenerateBoxError(f"degenerate box {t.detach().tolist()}")
    return t


def compute_modulation(feats0: Dict[str, torch.Tensor], box0: Union[BoundingBox, torch.Tensor],
                       net: IoUNet) -> ModulationVector:
    """首帧参考分支前向，得到每个特征块 1×Dz 的调制向量"""
    feats0 = _single(feats0)
    dtype = next(iter(feats0.values())).dtype
    return net.reference(feats0, _box_tensor(box0, dtype).reshape(1, 4))


def predict_iou(c: ModulationVector, feats: Dict[str, torch.Tensor], box: Union[BoundingBox, torch.Tensor],
                net: IoUNet) -> torch.Tensor:
    """单个框的预测 IoU（标量，对框坐标可导）"""
    feats = _single(feats)
    dtype = next(iter(feats.values())).dtype
    return net.predict(c, feats, _box_tensor(box, dtype).reshape(1, 1, 4))[0, 0]


# ---------------------------------------------------------------------------
# 几何 IoU 与候选框
# ---------------------------------------------------------------------------

def geometric_iou(a: BoundingBox, b: BoundingBox) -> float:
    """两个框的交并比"""
    corners = torch.tensor([a.to_corners(), b.to_corners()], dtype=torch.float64)
    return float(box_iou(corners[:1], corners[1:])[0, 0])


def paired_iou(boxes: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """boxes: N×P×4 与 gt: N×4（中心格式）逐对计算 IoU，返回 N×P"""
    rows = []
    for cand, target in zip(boxes, gt):
        rows.append(box_iou(box_convert(cand, "cxcywh", "xyxy"),
                            box_convert(target.reshape(1, 4), "cxcywh", "xyxy"))[:, 0])
    return torch.stack(rows)


def generate_candidates(
    gt: BoundingBox,
    n: int = 16,
    min_iou: float = 0.1,
    seed: Union[int, np.random.Generator, None] = 0,
) -> CandidateSet:
    """对真值框加高斯噪声生成候选框，拒绝采样保证 IoU ≥ min_iou

    每个候选框的噪声尺度从 SIGMA_FACTORS × (w, h) 中随机选取。
    """
    if n < 1:
        raise ValueError(f"generate_candidates: n must be >= 1, got {n}")
    if min_iou >= 1.0:
        return CandidateSet(boxes=[gt] * n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = np.array([gt.cx, gt.cy, gt.w, gt.h])
    scale = np.array([gt.w, gt.h, gt.w, gt.h])

    def draw() -> Optional[BoundingBox]:
        factor = SIGMA_FACTORS[rng.integers(len(SIGMA_FACTORS))]
        cx, cy, w, h = base + rng.normal(size=4) * factor * scale
        if w <= 1e-3 or h <= 1e-3:
            return None
        box = BoundingBox(cx=cx, cy=cy, w=w, h=h)
        return box if geometric_iou(box, gt) >= min_iou else None

    retrying = Retrying(stop=stop_after_attempt(CANDIDATE_ATTEMPTS), retry=retry_if_result(lambda b: b is None))
    boxes = []
    for i in range(n):
        try:
            boxes.append(retrying(draw))
        except RetryError:
            logger.error(f"Candidate {i}: no box with IoU >= {min_iou} after {CANDIDATE_ATTEMPTS} attempts")
            raise CandidateError(f"candidate {i}: retry budget of {CANDIDATE_ATTEMPTS} exhausted (min_iou={min_iou})")
    return CandidateSet(boxes=boxes)
