from typing import Union

import torch
import torch.nn.functional as F

from models.box import BoundingBox
from models.errors import DegenerateBoxError, NonFiniteError, ShapeError
from models.features import PooledFeature

# 宽或高不超过该值（像素）的框视为退化框
MIN_BOX_SIDE = 1e-6


def _hat_antiderivative(t: torch.Tensor) -> torch.Tensor:
    """帽函数 max(0, 1 − |t|) 从 −∞ 到 t 的积分"""
    t = torch.clamp(t, -1.0, 1.0)
    return torch.where(t < 0, 0.5 * (t + 1.0) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def _axis_weights(lo: torch.Tensor, hi: torch.Tensor, k: int, n: int) -> torch.Tensor:
    """单轴上 K 个区间对 n 个采样点的精确积分权重

    W[..., b, i] = ∫_{a_b}^{a_{b+1}} hat(t − i) dt，其中区间端点把 [lo, hi] 等分为 K 段。
    """
    steps = torch.arange(k + 1, dtype=lo.dtype, device=lo.device) / k
    edges = lo.unsqueeze(-1) + (hi - lo).unsqueeze(-1) * steps               # [..., K+1]
    grid = torch.arange(n, dtype=lo.dtype, device=lo.device)
    cum = _hat_antiderivative(edges.unsqueeze(-1) - grid)                     # [..., K+1, n]
    return cum[..., 1:, :] - cum[..., :-1, :]


def _check_boxes(boxes: torch.Tensor) -> None:
    if boxes.shape[-1] != 4:
        raise ShapeError("prpool", boxes.shape, (4,), "boxes must be (cx, cy, w, h)")
    if not bool(torch.isfinite(boxes.detach()).all()):
        raise NonFiniteError("prpool: non-finite box coordinates")
    sides = boxes.detach()[..., 2:]
    if bool((sides <= MIN_BOX_SIDE).any()):
        raise DegenerateBoxError(f"prpool: degenerate box with side <= {MIN_BOX_SIDE}: {sides.min().item():.3g}")


def pool_regions(
    features: torch.Tensor,
    boxes: torch.Tensor,
    k: int,
    spatial_scale: float = 1.0,
    offset: float = 0.0,
) -> torch.Tensor:
    """批量 Precise ROI Pooling

    Args:
        features: N×H×W×D 特征图
        boxes: N×P×4 框 (cx, cy, w, h)，以输入坐标表示
        k: 每边区间数
        spatial_scale: 输入坐标到特征坐标的缩放
        offset: 缩放后附加的平移（特征采样点 i 位于连续坐标 i）

    Returns:
        N×P×K×K×D，每个区间为双线性曲面在区间上的精确积分除以区间面积
    """
    if k < 1:
        raise ValueError(f"prpool: bin count must be >= 1, got {k}")
    if features.dim() != 4:
        raise ShapeError("prpool", features.shape, boxes.shape, "expected N×H×W×D features")
    if boxes.dim() != 3 or boxes.shape[0] != features.shape[0]:
        raise ShapeError("prpool", features.shape, boxes.shape, "expected N×P×4 boxes")
    _check_boxes(boxes)

    _, height, width, _ = features.shape
    cx, cy, w, h = boxes.unbind(-1)
    x1 = (cx - 0.5 * w) * spatial_scale + offset
    x2 = (cx + 0.5 * w) * spatial_scale + offset
    y1 = (cy - 0.5 * h) * spatial_scale + offset
    y2 = (cy + 0.5 * h) * spatial_scale + offset

    wy = _axis_weights(y1, y2, k, height)                    # N×P×K×H
    wx = _axis_weights(x1, x2, k, width)                     # N×P×K×W
    rows = torch.einsum("npkh,nhwd->npkwd", wy, features)
    pooled = torch.einsum("npkwd,nplw->npkld", rows, wx)
    bin_area = ((x2 - x1) * (y2 - y1) / (k * k)).reshape(boxes.shape[0], boxes.shape[1], 1, 1, 1)
    return pooled / bin_area


def prpool(feature_map: torch.Tensor, box: Union[BoundingBox, torch.Tensor], k: int) -> PooledFeature:
    """对单张 H×W×D 特征图上的一个框做 PrPool

    box 可以是 BoundingBox，也可以是需要梯度的 4 维张量（对框坐标求导时使用）。
    """
    if feature_map.dim() != 3:
        raise ShapeError("prpool", feature_map.shape, (4,), "expected H×W×D feature map")
    if isinstance(box, BoundingBox):
        source = box
        box_t = box.to_tensor(feature_map.dtype)
    else:
        box_t = box.to(feature_map.dtype)
        _check_boxes(box_t)
        source = BoundingBox.from_tensor(box_t)
    data = pool_regions(feature_map.unsqueeze(0), box_t.reshape(1, 1, 4), k)[0, 0]
    return PooledFeature(data=data, source_box=source)


def bilinear_at(feature_map: torch.Tensor, x, y) -> torch.Tensor:
    """特征图在连续坐标 (x, y) 处的双线性插值，越界采样点按零处理"""
    if feature_map.dim() != 3:
        raise ShapeError("bilinear_at", feature_map.shape, (), "expected H×W×D feature map")
    height, width, _ = feature_map.shape
    dtype = feature_map.dtype
    x = torch.as_tensor(x, dtype=dtype)
    y = torch.as_tensor(y, dtype=dtype)
    wx = F.relu(1.0 - torch.abs(x - torch.arange(width, dtype=dtype)))
    wy = F.relu(1.0 - torch.abs(y - torch.arange(height, dtype=dtype)))
    return torch.einsum("h,hwd,w->d", wy, feature_map, wx)


# ---------------------------------------------------------------------------
# 框参数化 B = (cx/w, cy/h, log w, log h)
# ---------------------------------------------------------------------------

def encode_boxes(boxes: torch.Tensor) -> torch.Tensor:
    """张量形式的编码，最后一维为 (cx, cy, w, h)"""
    if bool((boxes.detach()[..., 2:] <= 0).any()):
        raise DegenerateBoxError("box_encode: width and height must be positive")
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx / w, cy / h, torch.log(w), torch.log(h)], dim=-1)


def decode_boxes(codes: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(codes.detach()).all()):
        raise NonFiniteError("box_decode: non-finite encoding")
    u, v, lw, lh = codes.unbind(-1)
    w, h = torch.exp(lw), torch.exp(lh)
    return torch.stack([u * w, v * h, w, h], dim=-1)


def box_encode(box: BoundingBox) -> torch.Tensor:
    return encode_boxes(box.to_tensor(torch.float64))


def box_decode(code: torch.Tensor) -> BoundingBox:
    return BoundingBox.from_tensor(decode_boxes(code.to(torch.float64)))
