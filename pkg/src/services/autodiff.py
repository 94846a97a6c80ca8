from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from loguru import logger

from models.errors import NonFiniteError, ShapeError

# 微分带上的节点就是 requires_grad 的张量
DiffNode = torch.Tensor

PRECISIONS = {"f32": torch.float32, "f64": torch.float64}


def set_precision(name: str) -> torch.dtype:
    """设置默认数值精度（f32 用于跟踪，f64 用于数值校验）"""
    if name not in PRECISIONS:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    dtype = PRECISIONS[name]
    torch.set_default_dtype(dtype)
    return dtype


@contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    """在上下文内临时切换默认精度"""
    previous = torch.get_default_dtype()
    dtype = set_precision(name)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """以当前默认精度创建张量"""
    t = torch.as_tensor(data, dtype=torch.get_default_dtype()).clone()
    return t.requires_grad_(requires_grad)


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    """结果中出现 NaN/Inf 时抛出异常"""
    if not bool(torch.isfinite(t.detach()).all()):
        raise NonFiniteError(f"{what}: non-finite values in result of shape {tuple(t.shape)}")
    return t


def _check_broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# 张量代数
# ---------------------------------------------------------------------------

def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("add", a, b)
    return check_finite(a + b, "add")


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("sub", a, b)
    return check_finite(a - b, "sub")


def scale(a: torch.Tensor, factor: float) -> torch.Tensor:
    return check_finite(a * factor, "scale")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """逐元素乘法"""
    _check_broadcast("mul", a, b)
    return check_finite(a * b, "mul")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() == 0 or b.dim() == 0:
        raise ShapeError("matmul", a.shape, b.shape, "operands must have rank >= 1")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    return check_finite(a @ b, "matmul")


def total(a: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    """求和（dim 为 None 时得到标量）"""
    return check_finite(a.sum() if dim is None else a.sum(dim=dim), "sum")


def reshape(a: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    target = tuple(shape)
    known = [s for s in target if s != -1]
    expected = 1
    for s in known:
        expected *= s
    if -1 not in target and expected != a.numel():
        raise ShapeError("reshape", a.shape, target, "element counts differ")
    if -1 in target and (expected == 0 or a.numel() % expected != 0):
        raise ShapeError("reshape", a.shape, target, "cannot infer dimension")
    return a.reshape(target)


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    first = tensors[0]
    axis = dim % first.dim() if first.dim() else 0
    for t in tensors[1:]:
        if t.dim() != first.dim() or any(
            t.shape[i] != first.shape[i] for i in range(first.dim()) if i != axis
        ):
            raise ShapeError("concat", first.shape, t.shape, f"only axis {dim} may differ")
    return torch.cat(tensors, dim=dim)


# ---------------------------------------------------------------------------
# 神经网络基本算子（数据布局 H×W×C，可带前导批维度）
# ---------------------------------------------------------------------------

def _same_padding(kh: int, kw: int) -> tuple:
    """same 填充：偶数核时右/下多填一格，返回 (left, right, top, bottom)"""
    return ((kw - 1) // 2, kw - 1 - (kw - 1) // 2, (kh - 1) // 2, kh - 1 - (kh - 1) // 2)


def conv2d(
    x: torch.Tensor,
    w: torch.Tensor,
    stride: int = 1,
    padding: Union[int, str] = 0,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """多通道二维卷积

    Args:
        x: 输入特征 H×W×Cin 或 N×H×W×Cin
        w: 卷积核 k×k×Cin×Cout
        stride: 步长（>= 1）
        padding: 对称零填充的像素数，或 "same"（输出与输入同尺寸，仅 stride=1 时成立）
        bias: 可选偏置，长度 Cout

    Returns:
        输出特征 H'×W'×Cout，H' = floor((H + 2·padding − k)/stride) + 1
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.dim() not in (3, 4) or w.dim() != 4:
        raise ShapeError("conv2d", x.shape, w.shape, "expected H×W×C input and k×k×Cin×Cout kernel")
    kh, kw, cin, _ = w.shape
    if x.shape[-1] != cin:
        raise ShapeError("conv2d", x.shape, w.shape, "input channels differ from kernel channels")

    pads = _same_padding(kh, kw) if padding == "same" else (int(padding),) * 4
    height, width = x.shape[-3], x.shape[-2]
    if kh > height + pads[2] + pads[3] or kw > width + pads[0] + pads[1]:
        raise ShapeError("conv2d", x.shape, w.shape, "kernel larger than padded input")

    batched = x.dim() == 4
    xn = (x if batched else x.unsqueeze(0)).permute(0, 3, 1, 2)
    if any(pads):
        xn = F.pad(xn, pads)
    out = F.conv2d(xn, w.permute(3, 2, 0, 1).contiguous(), bias=bias, stride=stride).permute(0, 2, 3, 1)
    return check_finite(out if batched else out[0], "conv2d")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """全连接层，weight 形状为 in×out"""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape, "input features differ from weight rows")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return check_finite(out, "linear")


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def pelu(t: torch.Tensor, alpha: float) -> torch.Tensor:
    """参数化指数线性单元：t >= 0 时为 t，否则 alpha·(exp(t/alpha) − 1)，处处连续可导"""
    if alpha <= 0:
        raise ValueError(f"pelu: alpha must be positive, got {alpha}")
    negative = alpha * torch.expm1(torch.clamp(t, max=0.0) / alpha)
    return check_finite(torch.where(t >= 0, t, negative), "pelu")


def modulate(z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """按通道乘以系数向量：out[..., i, j, d] = z[..., i, j, d]·c[..., d]

    c 可以是 Dz、1×1×Dz 或带批维度的 N×Dz，缺少的空间维度自动补 1。
    """
    if c.shape[-1] != z.shape[-1]:
        raise ShapeError("modulate", z.shape, c.shape, "channel dimensions differ")
    if c.dim() < z.dim():
        c = c.reshape(tuple(c.shape[:-1]) + (1,) * (z.dim() - c.dim()) + tuple(c.shape[-1:]))
    _check_broadcast("modulate", z, c)
    return check_finite(z * c, "modulate")


def batchnorm(
    x: torch.Tensor,
    scale: Optional[torch.Tensor],
    shift: Optional[torch.Tensor],
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    mode: str = "eval",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> torch.Tensor:
    """按最后一维（通道）做批归一化

    train 模式使用当前批统计量并更新 running 统计量；eval 模式使用 running
    统计量，是确定性的仿射变换。
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode '{mode}'")
    channels = x.shape[-1]
    for name, p in (("scale", scale), ("shift", shift), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if p is not None and p.numel() != channels:
            raise ShapeError("batchnorm", x.shape, p.shape, f"{name} length differs from channel count")
    flat = x.reshape(-1, channels)
    out = F.batch_norm(flat, running_mean, running_var, weight=scale, bias=shift,
                       training=(mode == "train"), momentum=momentum, eps=eps)
    return check_finite(out.reshape(x.shape), "batchnorm")


# ---------------------------------------------------------------------------
# 反向传播
# ---------------------------------------------------------------------------

class Tape:
    """反向模式微分带

    记录被监视的叶子节点，并对同一张计算图支持多次反向传播（始终保留计算图），
    每次 BackProp 调用计数一次，用于统计优化器的调用预算。
    """

    def __init__(self, name: str = "tape"):
        self.name = name
        self.nodes: List[DiffNode] = []
        self.backprop_calls = 0

    def watch(self, value: torch.Tensor) -> DiffNode:
        """把张量登记为需要梯度的叶子节点（与原张量不共享计算图）"""
        node = value.detach().clone().requires_grad_(True)
        self.nodes.append(node)
        return node

    def backprop(self, s: DiffNode, wrt: Sequence[DiffNode], create_graph: bool = False) -> List[torch.Tensor]:
        """BackProp(s, v) = ∂s/∂v

        Args:
            s: 标量输出
            wrt: 求导变量列表，不在 s 计算图上的变量得到零梯度
            create_graph: 是否为梯度本身建图（双重反向传播时需要）

        Returns:
            与 wrt 一一对应、形状相同的梯度列表
        """
        if s.numel() != 1:
            raise ShapeError("backprop", s.shape, (), "output must be a scalar")
        wrt = list(wrt)
        self.backprop_calls += 1

        grads = [torch.zeros_like(v).detach() for v in wrt]
        active = [i for i, v in enumerate(wrt) if v.requires_grad]
        if active and s.requires_grad:
            computed = torch.autograd.grad(
                s.reshape(()),
                [wrt[i] for i in active],
                retain_graph=True,
                create_graph=create_graph,
                allow_unused=True,
            )
            for i, g in zip(active, computed):
                if g is not None:
                    grads[i] = g
        for g in grads:
            check_finite(g, "backprop")
        logger.trace(f"{self.name}: backprop call #{self.backprop_calls}")
        return grads

    def reset(self) -> None:
        self.nodes.clear()
        self.backprop_calls = 0


def backprop(
    s: DiffNode,
    wrt: Sequence[DiffNode],
    tape: Optional[Tape] = None,
    create_graph: bool = False,
) -> List[torch.Tensor]:
    """在给定（或临时）微分带上执行一次 BackProp"""
    return (tape or Tape()).backprop(s, wrt, create_graph=create_graph)


def detach(v: DiffNode) -> DiffNode:
    """返回数值相同、不向祖先节点传播梯度的节点"""
    return v.detach()
