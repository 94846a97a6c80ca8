import re
from pathlib import Path
from typing import List, Union

from loguru import logger
from PIL import Image

from models.box import BoundingBox
from models.errors import DatasetError
from models.sequence import Sequence

GT_FILENAMES = ("groundtruth.txt", "groundtruth_rect.txt")
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
_SEPARATORS = re.compile(r"[,\t ]+")


def _frame_dir(root: Path) -> Path:
    img = root / "img"
    return img if img.is_dir() else root


def parse_ground_truth(path: Path) -> List[BoundingBox]:
    """解析每行一个 "x,y,w,h"（左上角 + 宽高）的标注文件，分隔符可为逗号、制表符或空格"""
    boxes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p for p in _SEPARATORS.split(text) if p]
            if len(parts) != 4:
                raise DatasetError(f"{path}:{line_no}: expected 4 values, got {len(parts)}: '{text}'")
            try:
                x, y, w, h = (float(p) for p in parts)
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: non-numeric value in '{text}'")
            if w <= 0 or h <= 0:
                raise DatasetError(f"{path}:{line_no}: box size must be positive, got {w}×{h}")
            boxes.append(BoundingBox.from_xywh(x, y, w, h))
    return boxes


def load_sequence(directory: Union[str, Path]) -> Sequence:
    """读取 OTB/LaSOT 风格的序列目录：有序帧图像（目录下或 img/ 子目录）+ 标注文件

    帧按文件名排序并按需加载。
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"Sequence directory not found: {root}")
    gt_path = next((root / name for name in GT_FILENAMES if (root / name).is_file()), None)
    if gt_path is None:
        raise DatasetError(f"Ground-truth file not found: {root / GT_FILENAMES[0]}")

    frames = sorted(p for p in _frame_dir(root).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    boxes = parse_ground_truth(gt_path)
    if len(frames) != len(boxes):
        raise DatasetError(f"{root}: {len(frames)} frames but {len(boxes)} ground-truth lines in {gt_path.name}")
    logger.info(f"Loaded sequence {root.name} with {len(frames)} frames")
    return Sequence(name=root.name, ground_truth=boxes, frame_paths=frames)


def save_sequence(sequence: Sequence, directory: Union[str, Path]) -> Path:
    """把序列写成 img/00001.png ... 与 groundtruth.txt"""
    root = Path(directory)
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(sequence)):
        Image.fromarray(sequence.frame(i)).save(img_dir / f"{i + 1:05d}.png")
    with open(root / GT_FILENAMES[0], "w", encoding="utf-8") as f:
        for box in sequence.ground_truth:
            x, y, w, h = box.to_xywh()
            f.write(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}\n")
    logger.info(f"Saved sequence {sequence.name} to {root}")
    return root
