import math
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field

from models.box import BoundingBox


class CropTransform(BaseModel):
    """图像块与原图之间的仿射坐标变换：frame_x = x0 + patch_x / scale"""

    x0: float
    y0: float
    scale: float = Field(..., gt=0)

    def frame_to_patch(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(cx=(box.cx - self.x0) * self.scale, cy=(box.cy - self.y0) * self.scale,
                           w=box.w * self.scale, h=box.h * self.scale)

    def patch_to_frame(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(cx=self.x0 + box.cx / self.scale, cy=self.y0 + box.cy / self.scale,
                           w=box.w / self.scale, h=box.h / self.scale)

    def point_to_frame(self, x: float, y: float) -> Tuple[float, float]:
        return self.x0 + x / self.scale, self.y0 + y / self.scale

    def point_to_patch(self, x: float, y: float) -> Tuple[float, float]:
        return (x - self.x0) * self.scale, (y - self.y0) * self.scale


def feature_to_patch(cell: float, stride: int) -> float:
    """特征单元坐标（单元 i 位于 i）到图像块连续坐标"""
    return (cell + 0.5) * stride


def patch_to_feature(coord: float, stride: int) -> float:
    return coord / stride - 0.5


def frame_tensor(frame: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """uint8 H×W×3 图像转为 [0, 1] 浮点张量"""
    if isinstance(frame, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(frame))
    else:
        t = frame
    if t.dtype == torch.uint8:
        return t.to(torch.get_default_dtype()) / 255.0
    return t.to(torch.get_default_dtype())


def crop_side(box: BoundingBox, area_factor: float) -> float:
    """图像块对应的原图正方形边长 area_factor·√(w·h)"""
    return area_factor * math.sqrt(box.w * box.h)


def extract_patch(
    frame: Union[np.ndarray, torch.Tensor],
    box: BoundingBox,
    area_factor: float = 5.0,
    out_size: int = 288,
) -> Tuple[torch.Tensor, CropTransform]:
    """以框为中心裁剪边长 area_factor·√(w·h) 的正方形区域并双线性缩放到 out_size

    超出图像的部分填零。像素 i 覆盖连续坐标 [i, i+1)，图像块像素 u 采样
    原图坐标 x0 + (u + 0.5)/scale。

    Returns:
        (out_size×out_size×3 的图像块, 坐标变换)
    """
    if out_size < 1:
        raise ValueError(f"extract_patch: out_size must be >= 1, got {out_size}")
    image = frame_tensor(frame)
    if image.dim() != 3 or image.numel() == 0:
        raise ValueError(f"extract_patch: expected non-empty H×W×C frame, got {tuple(image.shape)}")
    height, width, _ = image.shape
    side = crop_side(box, area_factor)
    transform = CropTransform(x0=box.cx - side / 2.0, y0=box.cy - side / 2.0, scale=out_size / side)

    dtype = image.dtype
    centers = (torch.arange(out_size, dtype=dtype) + 0.5) / transform.scale
    xs = transform.x0 + centers
    ys = transform.y0 + centers
    # align_corners=False：归一化坐标 −1/1 对应图像边界
    gx = 2.0 * xs / width - 1.0
    gy = 2.0 * ys / height - 1.0
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1).unsqueeze(0)
    sampled = F.grid_sample(image.permute(2, 0, 1).unsqueeze(0), grid, mode="bilinear",
                            padding_mode="zeros", align_corners=False)
    return sampled[0].permute(1, 2, 0).contiguous(), transform


def needs_padding(frame_shape: Tuple[int, ...], transform: CropTransform, out_size: int) -> bool:
    """裁剪区域是否超出图像边界"""
    side = out_size / transform.scale
    height, width = frame_shape[:2]
    return transform.x0 < 0 or transform.y0 < 0 or transform.x0 + side > width or transform.y0 + side > height
