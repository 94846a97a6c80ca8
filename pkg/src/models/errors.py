from typing import Optional, Sequence


class TrackingError(Exception):
    """本项目所有业务异常的基类"""


class ShapeError(TrackingError, ValueError):
    """张量形状不匹配，消息中同时给出两个形状"""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: shape mismatch {self.left} vs {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFiniteError(TrackingError, FloatingPointError):
    """计算结果出现 NaN 或 Inf"""


class DegenerateBoxError(TrackingError, ValueError):
    """边界框宽或高过小"""


class ConvergenceError(TrackingError, RuntimeError):
    """优化过程发散或损失非有限，记录出错的迭代位置"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        super().__init__(message)


class CandidateError(TrackingError, RuntimeError):
    """候选框拒绝采样超出重试上限"""


class DatasetError(TrackingError, ValueError):
    """序列目录或标注文件格式错误"""


class SynthError(TrackingError, ValueError):
    """合成序列参数不可实现"""


class ModelFormatError(TrackingError, ValueError):
    """模型文件格式错误"""
