from typing import Dict, List, Tuple

import torch
from loguru import logger

from models.box import BoundingBox
from models.features import ModulationVector
from services.autodiff import Tape
from services.iou_net import IoUNet
from services.prpool import decode_boxes, encode_boxes

MIN_SIDE = 1.0


def refine_boxes(
    net: IoUNet,
    ref: ModulationVector,
    test_feats: Dict[str, torch.Tensor],
    boxes: torch.Tensor,
    steps: int = 5,
    step_len: float = 1.0,
    parametrization: str = "scaled",
    tape: Tape = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """对一批框做梯度上升以最大化预测 IoU

    scaled 参数化下梯度按 (w, h, w, h) 逐分量缩放后乘以步长；log 参数化在编码
    (cx/w, cy/h, log w, log h) 上直接上升。宽或高被截断到 1 像素的框停止更新。

    Args:
        net: IoU 网络（以 eval 模式运行）
        ref: 参考向量
        test_feats: net.test_features 的输出，每块 N×H×W×D
        boxes: N×P×4 初始框
        steps: 上升步数
        step_len: 步长

    Returns:
        (N×P×4 最终框, 至多 (steps+1)×N×P 的逐步预测 IoU)
    """
    if parametrization not in ("scaled", "log"):
        raise ValueError(f"Unknown ascent parametrization '{parametrization}'")
    tape = tape or Tape("ascent")
    was_training = net.training
    net.eval()
    current = boxes.detach().clone()
    active = torch.ones(current.shape[:-1], dtype=torch.bool)
    trace: List[torch.Tensor] = []
    try:
        for _ in range(steps):
            if parametrization == "log":
                code = tape.watch(encode_boxes(current))
                scores = net.predict_from(ref, test_feats, decode_boxes(code))
                grad = tape.backprop(scores.sum(), [code])[0].detach()
                proposal = decode_boxes(code.detach() + step_len * grad)
            else:
                b = tape.watch(current)
                scores = net.predict_from(ref, test_feats, b)
                grad = tape.backprop(scores.sum(), [b])[0].detach()
                scale = torch.cat([current[..., 2:], current[..., 2:]], dim=-1)
                proposal = current + step_len * grad * scale
            trace.append(scores.detach())

            clamped = (proposal[..., 2:] < MIN_SIDE).any(-1)
            proposal[..., 2:] = proposal[..., 2:].clamp(min=MIN_SIDE)
            current = torch.where(active.unsqueeze(-1), proposal, current)
            active = active & ~clamped
            if not bool(active.any()):
                break
        with torch.no_grad():
            trace.append(net.predict_from(ref, test_feats, current))
    finally:
        net.train(was_training)
    logger.debug(f"ascent: mean predicted IoU {float(trace[0].mean()):.4f} -> {float(trace[-1].mean()):.4f}")
    return current, torch.stack(trace)


def refine_box(
    net: IoUNet,
    ref: ModulationVector,
    feats: Dict[str, torch.Tensor],
    box: BoundingBox,
    steps: int = 5,
    step_len: float = 1.0,
    parametrization: str = "scaled",
) -> Tuple[BoundingBox, List[float]]:
    """单个框的梯度上升，返回最终框与逐步预测 IoU"""
    feats = {k: v.unsqueeze(0) if v.dim() == 3 else v for k, v in feats.items()}
    with torch.no_grad():
        was_training = net.training
        net.eval()
        test_feats = net.test_features(feats)
        net.train(was_training)
    dtype = next(iter(feats.values())).dtype
    final, trace = refine_boxes(net, ref, test_feats, box.to_tensor(dtype).reshape(1, 1, 4),
                                steps=steps, step_len=step_len, parametrization=parametrization)
    return BoundingBox.from_tensor(final[0, 0]), [float(s[0, 0]) for s in trace]
