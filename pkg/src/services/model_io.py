import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger

from models.errors import ModelFormatError
from services.autodiff import precision
from services.classifier import ClassifierWeights
from services.iou_net import IOU_KINDS, IoUNet

MAGIC = b"ATOMDSK1"

# dtype 编码：0 = f32, 1 = f64, 2 = i64（均为小端）
DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
NUMPY_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TORCH_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}


def write_tensors(path: Union[str, Path], tensors: Dict[str, torch.Tensor]) -> None:
    """写出命名张量文件

    格式：magic，u32 张量个数，然后每个张量依次为 u16 名称长度、名称（UTF-8）、
    u8 dtype 编码、u8 维数、各维 u32、小端原始数据。
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            t = tensor.detach().cpu()
            if t.dtype not in DTYPE_CODES:
                raise ModelFormatError(f"{name}: unsupported dtype {t.dtype}")
            code = DTYPE_CODES[t.dtype]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, t.dim()))
            f.write(struct.pack(f"<{t.dim()}I", *t.shape))
            f.write(t.contiguous().numpy().astype(NUMPY_DTYPES[code]).tobytes())


def read_tensors(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    """读取命名张量文件"""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ModelFormatError(f"{path}: truncated at byte {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in NUMPY_DTYPES:
            raise ModelFormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = NUMPY_DTYPES[code]
        numel = int(np.prod(dims)) if rank else 1
        array = np.frombuffer(take(numel * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = torch.from_numpy(array.copy()).to(TORCH_DTYPES[code])
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors


def save_model(path: Union[str, Path], net: IoUNet, cls: Optional[ClassifierWeights] = None) -> None:
    """保存 IoU 网络（参数与 BatchNorm 统计量，前缀 iou.）及可选的分类器权重"""
    tensors = {f"iou.{k}": v for k, v in net.state_dict().items()}
    tensors["meta.iou_kind"] = torch.tensor([IOU_KINDS.index(net.kind)], dtype=torch.int64)
    tensors["meta.iou_dims"] = torch.tensor(
        [net.dz, net.hidden, net.ref_pool, net.test_pool,
         net.in_channels["block3"], net.in_channels["block4"], net.seed],
        dtype=torch.int64,
    )
    if cls is not None:
        tensors["cls.w1"] = cls.w1
        tensors["cls.w2"] = cls.w2
    write_tensors(path, tensors)
    logger.info(f"Saved {len(tensors)} tensors to {path}")


def load_model(path: Union[str, Path]) -> Tuple[IoUNet, Optional[ClassifierWeights]]:
    """从模型文件重建 IoU 网络（eval 模式）及分类器权重（若存在）"""
    tensors = read_tensors(path)
    try:
        kind = IOU_KINDS[int(tensors["meta.iou_kind"][0])]
        dz, hidden, ref_pool, test_pool, c3, c4, seed = (int(v) for v in tensors["meta.iou_dims"])
    except (KeyError, IndexError, ValueError) as e:
        raise ModelFormatError(f"{path}: missing or invalid metadata ({e})")
    floats = [v.dtype for k, v in tensors.items() if k.startswith("iou.") and v.is_floating_point()]
    if not floats:
        raise ModelFormatError(f"{path}: no IoU network tensors")
    with precision("f64" if floats[0] == torch.float64 else "f32"):
        net = IoUNet(kind=kind, in_channels={"block3": c3, "block4": c4}, dz=dz, hidden=hidden,
                     ref_pool=ref_pool, test_pool=test_pool, seed=seed)
    state = {k[len("iou."):]: v for k, v in tensors.items() if k.startswith("iou.")}
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise ModelFormatError(f"{path}: IoU network tensors do not match the declared architecture ({e})")
    net.eval()
    cls = None
    if "cls.w1" in tensors and "cls.w2" in tensors:
        cls = ClassifierWeights(w1=tensors["cls.w1"], w2=tensors["cls.w2"])
    logger.info(f"Loaded IoU network '{kind}' from {path}")
    return net, cls
