import math
from typing import List, Tuple

import numpy as np
from loguru import logger

from models.box import BoundingBox
from models.errors import SynthError
from models.sequence import Sequence, SynthSpec

SUITE_CATEGORIES = ("static", "translation", "scale", "aspect-change", "rotation", "distractors")


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.frame_height, spec.frame_width
    base = rng.uniform(40, 200, size=3)
    if spec.background == "flat":
        return np.broadcast_to(base, (h, w, 3)).astype(np.float64)
    if spec.background == "stripes":
        angle = rng.uniform(0, math.pi)
        period = rng.uniform(12, 30)
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        v = 0.5 + 0.5 * np.sin(2 * math.pi * (xs * math.cos(angle) + ys * math.sin(angle)) / period)
        return base + (v[..., None] - 0.5) * 60.0
    # 低频噪声：在粗网格上采样后最近邻放大
    coarse = rng.normal(0, 25, size=(h // 8 + 1, w // 8 + 1, 3))
    return base + np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:h, :w]


def _shape_mask(xs: np.ndarray, ys: np.ndarray, box: BoundingBox, shape: str) -> np.ndarray:
    dx = (xs - box.cx) / (box.w / 2.0)
    dy = (ys - box.cy) / (box.h / 2.0)
    if shape == "ellipse":
        return dx ** 2 + dy ** 2 <= 1.0
    return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)


def _paint(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray, box: BoundingBox, shape: str,
           colors: Tuple[np.ndarray, np.ndarray], angle: float) -> None:
    """在框内绘制带旋转条纹纹理的目标"""
    mask = _shape_mask(xs, ys, box, shape)
    period = max(4.0, min(box.w, box.h) / 3.0)
    u = (xs - box.cx) * math.cos(angle) + (ys - box.cy) * math.sin(angle)
    v = (0.5 + 0.5 * np.sin(2 * math.pi * u / period))[..., None]
    texture = colors[0] * v + colors[1] * (1.0 - v)
    frame[mask] = texture[mask]


def _trajectory(spec: SynthSpec, sizes: List[Tuple[float, float]], rng: np.random.Generator) -> List[Tuple[float, float]]:
    """目标中心轨迹：平移运动在图像边界处反弹，保证目标始终在画面内"""
    max_w = max(s[0] for s in sizes)
    max_h = max(s[1] for s in sizes)
    lo_x, hi_x = max_w / 2.0, spec.frame_width - max_w / 2.0
    lo_y, hi_y = max_h / 2.0, spec.frame_height - max_h / 2.0
    x = rng.uniform(lo_x + 0.25 * (hi_x - lo_x), hi_x - 0.25 * (hi_x - lo_x))
    y = rng.uniform(lo_y + 0.25 * (hi_y - lo_y), hi_y - 0.25 * (hi_y - lo_y))
    heading = rng.uniform(0, 2 * math.pi)
    vx, vy = spec.speed * math.cos(heading), spec.speed * math.sin(heading)
    if spec.motion == "static":
        vx = vy = 0.0
    path = []
    for _ in range(spec.n_frames):
        path.append((x, y))
        x, y = x + vx, y + vy
        if not lo_x <= x <= hi_x:
            vx = -vx
            x = min(max(x, lo_x), hi_x)
        if not lo_y <= y <= hi_y:
            vy = -vy
            y = min(max(y, lo_y), hi_y)
    return path


def synth_sequence(spec: SynthSpec, seed: int = 0) -> Sequence:
    """按给定参数渲染合成序列，真值框精确已知

    Args:
        spec: 帧数、目标形状、运动、尺度/宽高比漂移、纹理旋转、干扰物与背景
        seed: 随机种子，相同种子得到逐像素相同的序列

    Returns:
        内存中的 Sequence
    """
    rng = np.random.default_rng(seed)
    n = spec.n_frames
    progress = [t / (n - 1) if n > 1 else 0.0 for t in range(n)]
    sizes = []
    for p in progress:
        s = spec.scale_drift ** p
        a = math.sqrt(spec.aspect_drift ** p)
        sizes.append((spec.target_w * s * a, spec.target_h * s / a))
    if max(w for w, _ in sizes) >= spec.frame_width or max(h for _, h in sizes) >= spec.frame_height:
        raise SynthError(
            f"{spec.name}: target up to {max(w for w, _ in sizes):.1f}×{max(h for _, h in sizes):.1f} "
            f"does not fit into a {spec.frame_width}×{spec.frame_height} frame"
        )

    background = _background(spec, rng)
    colors = (rng.uniform(0, 255, size=3), rng.uniform(0, 255, size=3))
    path = _trajectory(spec, sizes, rng)

    distractors = []
    for _ in range(spec.distractors):
        offset = rng.uniform(-0.1, 0.1, size=3) * 255
        d_colors = (np.clip(colors[0] + offset, 0, 255), np.clip(colors[1] + offset, 0, 255))
        d_spec = spec.model_copy(update={"speed": max(spec.speed, 1.0), "motion": "translation"})
        distractors.append((d_colors, _trajectory(d_spec, sizes, rng)))

    ys, xs = np.mgrid[0:spec.frame_height, 0:spec.frame_width] + 0.5
    images, boxes = [], []
    for t in range(n):
        frame = background.copy()
        w, h = sizes[t]
        angle = math.radians(spec.rotation * progress[t])
        for d_colors, d_path in distractors:
            d_box = BoundingBox(cx=d_path[t][0], cy=d_path[t][1], w=w, h=h)
            _paint(frame, xs, ys, d_box, spec.shape, d_colors, angle)
        box = BoundingBox(cx=path[t][0], cy=path[t][1], w=w, h=h)
        _paint(frame, xs, ys, box, spec.shape, colors, angle)
        images.append(np.clip(frame, 0, 255).astype(np.uint8))
        boxes.append(box)
    logger.debug(f"Rendered synthetic sequence {spec.name} ({spec.category}, {n} frames)")
    return Sequence(name=spec.name, ground_truth=boxes, images=images, category=spec.category)


def category_spec(category: str, index: int, n_frames: int = 100, frame_height: int = 240,
                  frame_width: int = 320, seed: int = 0) -> SynthSpec:
    """合成基准中某一类别的序列参数"""
    if category not in SUITE_CATEGORIES:
        raise SynthError(f"Unknown synthetic category '{category}'")
    rng = np.random.default_rng([seed, SUITE_CATEGORIES.index(category), index])
    base = dict(
        name=f"{category}-{index:02d}",
        category=category,
        n_frames=n_frames,
        frame_height=frame_height,
        frame_width=frame_width,
        shape="ellipse" if rng.random() < 0.5 else "rectangle",
        target_w=float(rng.uniform(28, 44)),
        target_h=float(rng.uniform(24, 40)),
        background=("flat", "noise", "stripes")[rng.integers(3)],
    )
    if category == "translation":
        base.update(motion="translation", speed=float(rng.uniform(1.0, 3.0)))
    elif category == "scale":
        base.update(motion="translation", speed=1.0, scale_drift=float(rng.choice([0.6, 1.6])))
    elif category == "aspect-change":
        base.update(motion="translation", speed=1.0, aspect_drift=float(rng.choice([0.4, 2.5])))
    elif category == "rotation":
        base.update(motion="translation", speed=1.0, rotation=float(rng.uniform(90, 180)))
    elif category == "distractors":
        base.update(motion="translation", speed=1.5, distractors=int(rng.integers(1, 3)))
    return SynthSpec(**base)


def standard_suite(per_category: int = 4, n_frames: int = 100, frame_height: int = 240,
                   frame_width: int = 320, seed: int = 0,
                   categories: Tuple[str, ...] = SUITE_CATEGORIES) -> List[Sequence]:
    """六类合成序列组成的评测集"""
    suite = []
    for category in categories:
        for i in range(per_category):
            spec = category_spec(category, i, n_frames, frame_height, frame_width, seed)
            suite.append(synth_sequence(spec, seed=seed * 1000 + SUITE_CATEGORIES.index(category) * 100 + i))
    logger.info(f"Synthetic suite: {len(suite)} sequences × {n_frames} frames")
    return suite
