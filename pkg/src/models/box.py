import math
from typing import Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field


class BoundingBox(BaseModel):
    """轴对齐边界框，以中心点和宽高表示（单位：像素）

    像素 i 覆盖连续坐标区间 [i, i+1)，角点形式 (x1, y1, x2, y2) 与
    中心形式之间的转换是无损的。
    """

    model_config = ConfigDict(frozen=True)

    # 中心点横坐标
    cx: float = Field(..., description="center x")
    # 中心点纵坐标
    cy: float = Field(..., description="center y")
    # 宽度，必须为正
    w: float = Field(..., gt=0, description="width")
    # 高度，必须为正
    h: float = Field(..., gt=0, description="height")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        """从左上角 + 宽高（标注文件格式）构造"""
        return cls(cx=x + w / 2.0, cy=y + h / 2.0, w=w, h=h)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "BoundingBox":
        values = [float(v) for v in t.detach().reshape(-1).tolist()]
        return cls(cx=values[0], cy=values[1], w=values[2], h=values[3])

    def to_corners(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def to_tensor(self, dtype: torch.dtype = None) -> torch.Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h],
                            dtype=dtype or torch.get_default_dtype())

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return self.w / self.h

    @property
    def size(self) -> float:
        """几何平均边长 sqrt(w*h)"""
        return math.sqrt(self.w * self.h)

    def with_center(self, cx: float, cy: float) -> "BoundingBox":
        return BoundingBox(cx=cx, cy=cy, w=self.w, h=self.h)

    def scaled(self, factor: float) -> "BoundingBox":
        """保持中心与宽高比，按比例缩放尺寸"""
        return BoundingBox(cx=self.cx, cy=self.cy, w=self.w * factor, h=self.h * factor)

    def center_distance(self, other: "BoundingBox") -> float:
        return math.hypot(self.cx - other.cx, self.cy - other.cy)
