import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torchvision.transforms.functional as TF
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from models.errors import ShapeError
from models.features import AugmentedPatch
from models.tracking import LabelConfig, OptimizerRun
from services.autodiff import Tape, concat, conv2d, pelu
from services.optim import ResidualProblem, minimize

PELU_ALPHA = 0.05

# 首帧增广的固定组合：5 个平移、12 个旋转、5 个模糊、7 个随机丢弃，加上原图共 30 个
ROTATION_ANGLES = (5.0, -5.0, 10.0, -10.0, 20.0, -20.0, 30.0, -30.0, 45.0, -45.0, 60.0, -60.0)
BLUR_SIGMAS = (0.5, 1.0, 1.5, 2.0, 3.0)
SHIFT_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1))
DROPOUT_COUNT = 7
DROPOUT_PROB = 0.2
SHIFT_FRACTION = 0.06


class ClassifierWeights(BaseModel):
    """两层全卷积分类器的权重：w1 为 1×1×D×Dout 降维层，w2 为 k×k×Dout×1 输出层"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    w1: torch.Tensor
    w2: torch.Tensor
    lambda1: float = Field(1e-2, ge=0)
    lambda2: float = Field(1e-2, ge=0)

    @classmethod
    def create(
        cls,
        in_dim: int,
        out_dim: int = 64,
        kernel: int = 4,
        lambda1: float = 1e-2,
        lambda2: float = 1e-2,
        seed: int = 0,
    ) -> "ClassifierWeights":
        """w1 用固定种子的高斯随机初始化（按 1/√D 缩放），w2 初始化为零"""
        generator = torch.Generator().manual_seed(seed)
        dtype = torch.get_default_dtype()
        w1 = torch.randn(1, 1, in_dim, out_dim, generator=generator, dtype=dtype) / math.sqrt(in_dim)
        w2 = torch.zeros(kernel, kernel, out_dim, 1, dtype=dtype)
        return cls(w1=w1, w2=w2, lambda1=lambda1, lambda2=lambda2)

    def as_dict(self) -> Dict[str, torch.Tensor]:
        return {"w1": self.w1, "w2": self.w2}

    def with_tensors(self, tensors: Dict[str, torch.Tensor]) -> "ClassifierWeights":
        return ClassifierWeights(w1=tensors["w1"], w2=tensors["w2"],
                                 lambda1=self.lambda1, lambda2=self.lambda2)

    def clone(self) -> "ClassifierWeights":
        return self.with_tensors({k: v.detach().clone() for k, v in self.as_dict().items()})


def classify(x: torch.Tensor, weights: ClassifierWeights) -> torch.Tensor:
    """f(x; w) = PELU(w2 ∗ (w1 ∗ x))，φ1 为恒等映射

    Args:
        x: 特征 H×W×D 或 N×H×W×D
        weights: 分类器权重

    Returns:
        与输入空间尺寸相同的得分图 H×W（或 N×H×W）
    """
    if x.shape[-1] != weights.w1.shape[2]:
        raise ShapeError("classify", x.shape, weights.w1.shape, "feature channels differ from w1 input")
    reduced = conv2d(x, weights.w1)
    scores = conv2d(reduced, weights.w2, padding="same")
    return pelu(scores, PELU_ALPHA)[..., 0]


def make_label(center: Tuple[float, float], config: LabelConfig, size: Tuple[int, int]) -> torch.Tensor:
    """以 center = (cx, cy)（得分图单元坐标）为中心的采样高斯标签，size = (H, W)"""
    height, width = size
    dtype = torch.get_default_dtype()
    rows = torch.arange(height, dtype=dtype).reshape(-1, 1)
    cols = torch.arange(width, dtype=dtype).reshape(1, -1)
    cx, cy = center
    dist2 = (rows - cy) ** 2 + (cols - cx) ** 2
    return config.amplitude * torch.exp(-dist2 / (2.0 * config.sigma ** 2))


class SampleMemory:
    """加权训练样本集合 (x_j, y_j, γ_j)，权重始终非负且和为 1"""

    def __init__(self, capacity: int = 50, learning_rate: float = 0.01):
        if capacity < 1:
            raise ValueError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.learning_rate = learning_rate
        self.features: List[torch.Tensor] = []
        self.labels: List[torch.Tensor] = []
        self.weights: List[float] = []

    def __len__(self) -> int:
        return len(self.features)

    def _check_sample(self, x: torch.Tensor, label: torch.Tensor) -> None:
        if x.shape[:2] != label.shape:
            raise ShapeError("add_sample", x.shape, label.shape, "label must match feature spatial size")
        if self.features and x.shape != self.features[0].shape:
            raise ShapeError("add_sample", self.features[0].shape, x.shape, "feature shape differs from memory")

    def add_sample(self, x: torch.Tensor, label: torch.Tensor, boost: float = 1.0) -> None:
        """加入新样本：旧权重乘以 (1 − η·boost)，新样本权重 η·boost，再整体归一化

        容量已满时先移除权重最小的样本；首个样本权重为 1。
        """
        self._check_sample(x, label)
        x, label = x.detach(), label.detach()
        if not self.features:
            self.features, self.labels, self.weights = [x], [label], [1.0]
            return
        if len(self.features) >= self.capacity:
            evict = min(range(len(self.weights)), key=self.weights.__getitem__)
            logger.debug(f"memory full, evicting sample {evict} (weight {self.weights[evict]:.4g})")
            del self.features[evict], self.labels[evict], self.weights[evict]
        rate = self.learning_rate * boost
        decay = max(0.0, 1.0 - rate)
        self.weights = [w * decay for w in self.weights] + [rate]
        self.features.append(x)
        self.labels.append(label)
        total = sum(self.weights)
        self.weights = [w / total for w in self.weights]

    def seed(self, features: Sequence[torch.Tensor], labels: Sequence[torch.Tensor]) -> None:
        """用首帧增广样本初始化，各样本权重相等"""
        if len(features) != len(labels):
            raise ValueError(f"{len(features)} features but {len(labels)} labels")
        if len(features) > self.capacity:
            raise ValueError(f"{len(features)} initial samples exceed memory capacity {self.capacity}")
        self.features, self.labels, self.weights = [], [], []
        for x, y in zip(features, labels):
            self._check_sample(x, y)
            self.features.append(x.detach())
            self.labels.append(y.detach())
        self.weights = [1.0 / len(features)] * len(features)

    def stacked(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """返回 (X: m×H×W×D, Y: m×H×W, γ: m)"""
        if not self.features:
            raise ValueError("sample memory is empty")
        gamma = torch.tensor(self.weights, dtype=self.features[0].dtype)
        return torch.stack(self.features), torch.stack(self.labels), gamma


def residual_vector(memory: SampleMemory, weights: ClassifierWeights) -> torch.Tensor:
    """r(w) = [√γ_j (f(x_j; w) − y_j)]_j ⊕ √λ1 w1 ⊕ √λ2 w2"""
    features, labels, gamma = memory.stacked()
    scores = classify(features, weights)
    data = (scores - labels) * gamma.sqrt().reshape(-1, 1, 1)
    return concat([
        data.reshape(-1),
        math.sqrt(weights.lambda1) * weights.w1.reshape(-1),
        math.sqrt(weights.lambda2) * weights.w2.reshape(-1),
    ])


def classification_loss(memory: SampleMemory, weights: ClassifierWeights) -> float:
    """直接按加权 L2 分类误差加正则项计算损失"""
    total = 0.0
    with torch.no_grad():
        for x, y, g in zip(memory.features, memory.labels, memory.weights):
            total += g * float(((classify(x, weights) - y) ** 2).sum())
        total += weights.lambda1 * float((weights.w1 ** 2).sum())
        total += weights.lambda2 * float((weights.w2 ** 2).sum())
    return total


def _residual_problem(memory: SampleMemory, weights: ClassifierWeights,
                      trainable: Sequence[str]) -> ResidualProblem:
    return ResidualProblem(
        lambda ws: residual_vector(memory, weights.with_tensors(ws)),
        {k: v.detach() for k, v in weights.as_dict().items()},
        trainable=trainable,
    )


def _optimize(
    memory: SampleMemory,
    weights: ClassifierWeights,
    trainable: Sequence[str],
    n_gn: int,
    n_cg: int,
    method: str,
    tape: Optional[Tape],
    gd_lr: float,
    gd_momentum: float,
    gdpp_factor: int,
) -> OptimizerRun:
    problem = _residual_problem(memory, weights, trainable)
    run = minimize(problem, n_gn, n_cg, method=method, tape=tape,
                   gd_lr=gd_lr, gd_momentum=gd_momentum, gdpp_factor=gdpp_factor)
    weights.w1 = problem.weights["w1"]
    weights.w2 = problem.weights["w2"]
    return run


def train_initial(
    memory: SampleMemory,
    weights: ClassifierWeights,
    method: str = "gncg",
    n_gn: int = 6,
    n_cg: int = 10,
    tape: Optional[Tape] = None,
    gd_lr: float = 0.5,
    gd_momentum: float = 0.9,
    gdpp_factor: int = 5,
) -> OptimizerRun:
    """首帧训练：同时优化 w1 与 w2"""
    run = _optimize(memory, weights, ("w1", "w2"), n_gn, n_cg, method, tape, gd_lr, gd_momentum, gdpp_factor)
    logger.info(f"Initial classifier training ({method}): loss {run.initial_loss:.5g} -> "
                f"{run.final_loss:.5g} in {run.backprop_calls} backprop calls")
    return run


def train_update(
    memory: SampleMemory,
    weights: ClassifierWeights,
    method: str = "gncg",
    n_gn: int = 1,
    n_cg: int = 5,
    tape: Optional[Tape] = None,
    gd_lr: float = 0.5,
    gd_momentum: float = 0.9,
    gdpp_factor: int = 5,
) -> OptimizerRun:
    """在线更新：w1 冻结，仅优化 w2"""
    run = _optimize(memory, weights, ("w2",), n_gn, n_cg, method, tape, gd_lr, gd_momentum, gdpp_factor)
    logger.debug(f"Classifier update ({method}): loss {run.initial_loss:.5g} -> {run.final_loss:.5g}")
    return run


# ---------------------------------------------------------------------------
# 首帧数据增广
# ---------------------------------------------------------------------------

def _blur_kernel(sigma: float) -> int:
    return 2 * math.ceil(2.0 * sigma) + 1


def augment_first_frame(patch: torch.Tensor, n: int = 30, seed: int = 0) -> List[AugmentedPatch]:
    """对首帧图像块做平移、旋转、模糊与随机丢弃增广

    Args:
        patch: 以目标为中心的图像块 H×W×3
        n: 返回的样本数，第 0 个始终是原图
        seed: 随机丢弃与额外随机变换的种子

    Returns:
        n 个增广样本；平移样本的 offset 记录目标中心的位移
    """
    if n < 1:
        raise ValueError(f"augment_first_frame: n must be >= 1, got {n}")
    generator = torch.Generator().manual_seed(seed)
    chw = patch.permute(2, 0, 1)
    shift = round(SHIFT_FRACTION * patch.shape[0])

    def to_hwc(img: torch.Tensor) -> torch.Tensor:
        return img.permute(1, 2, 0).contiguous()

    def shifted(dx: int, dy: int) -> AugmentedPatch:
        img = TF.affine(chw, angle=0.0, translate=[dx, dy], scale=1.0, shear=[0.0, 0.0])
        return AugmentedPatch(image=to_hwc(img), offset=(float(dx), float(dy)), transform=f"shift({dx},{dy})")

    samples = [AugmentedPatch(image=patch.clone(), transform="identity")]
    samples += [shifted(sx * shift, sy * shift) for sx, sy in SHIFT_DIRECTIONS]
    samples += [AugmentedPatch(image=to_hwc(TF.rotate(chw, angle)), transform=f"rotate({angle:g})")
                for angle in ROTATION_ANGLES]
    samples += [AugmentedPatch(image=to_hwc(TF.gaussian_blur(chw, [_blur_kernel(s)] * 2, [s, s])),
                               transform=f"blur({s:g})")
                for s in BLUR_SIGMAS]
    for i in range(DROPOUT_COUNT):
        keep = (torch.rand(patch.shape[:2], generator=generator) >= DROPOUT_PROB).to(patch.dtype)
        samples.append(AugmentedPatch(image=patch * keep.unsqueeze(-1), transform=f"dropout({i})"))

    # 超出固定组合时追加随机平移 + 旋转
    while len(samples) < n:
        dx, dy = (torch.randint(-shift, shift + 1, (2,), generator=generator)).tolist()
        angle = float(torch.empty(()).uniform_(-30.0, 30.0, generator=generator))
        img = TF.affine(chw, angle=angle, translate=[dx, dy], scale=1.0, shear=[0.0, 0.0])
        samples.append(AugmentedPatch(image=to_hwc(img), offset=(float(dx), float(dy)),
                                      transform=f"random({dx},{dy},{angle:.1f})"))
    return samples[:n]
