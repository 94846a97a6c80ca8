from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.box import BoundingBox


class Sequence(BaseModel):
    """视频序列：有序帧（内存数组或按需加载的文件）与逐帧真值框"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    ground_truth: List[BoundingBox]
    # 内存中的帧，uint8 H×W×3
    images: Optional[List[np.ndarray]] = None
    # 按需加载的帧文件
    frame_paths: Optional[List[Path]] = None
    # 合成序列的类别（static / translation / ...）
    category: Optional[str] = None

    @model_validator(mode="after")
    def _check_lengths(self) -> "Sequence":
        if (self.images is None) == (self.frame_paths is None):
            raise ValueError("exactly one of images / frame_paths must be given")
        n_frames = len(self.images if self.images is not None else self.frame_paths)
        if n_frames != len(self.ground_truth):
            raise ValueError(
                f"sequence {self.name}: {n_frames} frames but {len(self.ground_truth)} ground-truth boxes"
            )
        return self

    def __len__(self) -> int:
        return len(self.ground_truth)

    def frame(self, index: int) -> np.ndarray:
        """返回第 index 帧（uint8 H×W×3）"""
        if self.images is not None:
            return self.images[index]
        with Image.open(self.frame_paths[index]) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)


class SynthSpec(BaseModel):
    """合成序列的生成参数"""

    name: str = "synth"
    category: str = "static"
    n_frames: int = Field(100, ge=1)
    frame_height: int = Field(240, gt=0)
    frame_width: int = Field(320, gt=0)
    shape: Literal["rectangle", "ellipse"] = "rectangle"
    target_w: float = Field(40.0, gt=0)
    target_h: float = Field(30.0, gt=0)
    motion: Literal["static", "translation"] = "static"
    speed: float = Field(0.0, ge=0)              # 像素/帧
    scale_drift: float = Field(1.0, gt=0)        # 末帧相对首帧的尺度
    aspect_drift: float = Field(1.0, gt=0)       # 末帧相对首帧的宽高比倍数
    rotation: float = 0.0                        # 目标纹理的总旋转角度（度）
    distractors: int = Field(0, ge=0)
    background: Literal["flat", "noise", "stripes"] = "noise"


class EvalReport(BaseModel):
    """单个序列（或整个数据集）的评测结果，百分比均在 [0, 100]"""

    name: str
    ious: List[float]
    thresholds: List[float]
    op: List[float]
    auc: float = Field(..., ge=0, le=100)
    op50: float
    op75: float
    precision: float
    norm_precision: float
    mean_frame_time: float = 0.0

    @property
    def fps(self) -> float:
        return 1.0 / self.mean_frame_time if self.mean_frame_time > 0 else 0.0
