from typing import Dict, Sequence

import torch
from loguru import logger
from torch import nn

from services.autodiff import conv2d, relu

# 输出给两个头部的特征块及其步长
FEATURE_STRIDES = {"block3": 8, "block4": 16}
# 分类器使用的特征块
CLASSIFIER_BLOCK = "block4"


class Backbone(nn.Module):
    """固定随机权重的四阶段卷积骨干网络

    每个阶段是一层 3×3、步长 2 的卷积加 ReLU；第三、四阶段输出分别作为步长 8
    和步长 16 的特征块。权重用给定种子做 Kaiming 初始化后冻结。
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256), seed: int = 0, in_channels: int = 3):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"backbone needs 4 stage widths, got {list(widths)}")
        self.widths = tuple(int(w) for w in widths)
        self.seed = seed
        self.calls = 0
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            cin = in_channels
            for i, cout in enumerate(self.widths):
                kernel = torch.empty(cout, cin, 3, 3, dtype=torch.get_default_dtype())
                nn.init.kaiming_normal_(kernel, nonlinearity="relu")
                # 存为 k×k×Cin×Cout 布局
                self.register_buffer(f"stage{i + 1}", kernel.permute(2, 3, 1, 0).contiguous())
                cin = cout
        logger.info(f"Backbone initialized with widths {self.widths}, seed {seed}")

    @property
    def channels(self) -> Dict[str, int]:
        return {"block3": self.widths[2], "block4": self.widths[3]}

    def forward(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        """images: H×W×3 或 N×H×W×3，取值 [0, 1]；返回 block3 / block4 特征（与输入同样的批维度）"""
        self.calls += 1
        x = (images.to(self.stage1.dtype) - 0.5) / 0.25
        features = {}
        with torch.no_grad():
            for i in range(4):
                x = relu(conv2d(x, getattr(self, f"stage{i + 1}"), stride=2, padding=1))
                if i == 2:
                    features["block3"] = x
            features["block4"] = x
        return features

    def reset_counter(self) -> None:
        self.calls = 0
