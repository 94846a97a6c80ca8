from typing import Dict, List, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, model_validator

from models.box import BoundingBox


class PooledFeature(BaseModel):
    """PrPool 的输出：K×K×D 的池化特征及其来源框"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: torch.Tensor
    source_box: BoundingBox

    @model_validator(mode="after")
    def _check_shape(self) -> "PooledFeature":
        if self.data.dim() != 3 or self.data.shape[0] != self.data.shape[1] or self.data.shape[0] < 1:
            raise ValueError(f"pooled feature must be K×K×D with K >= 1, got {tuple(self.data.shape)}")
        return self

    @property
    def k(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


class ModulationVector(BaseModel):
    """参考帧计算得到的逐特征块调制系数（每块 1×1×Dz，或带批维度 N×Dz）"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    blocks: Dict[str, torch.Tensor]

    @model_validator(mode="after")
    def _check_finite(self) -> "ModulationVector":
        for name, c in self.blocks.items():
            if not bool(torch.isfinite(c).all()):
                raise ValueError(f"modulation block {name} contains non-finite values")
        return self

    def detached(self) -> "ModulationVector":
        return ModulationVector(blocks={k: v.detach() for k, v in self.blocks.items()})

    def zeros_like(self) -> "ModulationVector":
        return ModulationVector(blocks={k: torch.zeros_like(v) for k, v in self.blocks.items()})


class CandidateSet(BaseModel):
    """候选框集合，可附带预测 IoU"""

    boxes: List[BoundingBox]
    scores: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_scores(self) -> "CandidateSet":
        if self.scores is not None:
            if not self.boxes:
                raise ValueError("scored candidate set must not be empty")
            if len(self.scores) != len(self.boxes):
                raise ValueError(f"{len(self.scores)} scores for {len(self.boxes)} boxes")
        return self

    def __len__(self) -> int:
        return len(self.boxes)

    def to_tensor(self, dtype: torch.dtype = None) -> torch.Tensor:
        """P×4 张量 (cx, cy, w, h)"""
        return torch.stack([b.to_tensor(dtype) for b in self.boxes])


class AugmentedPatch(BaseModel):
    """首帧增广样本：图像块（H×W×3）及目标中心相对图像块中心的平移（像素）"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: torch.Tensor
    offset: Tuple[float, float] = (0.0, 0.0)
    transform: str = "identity"
