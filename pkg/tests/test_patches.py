import numpy as np
import pytest
import torch

from models.box import BoundingBox
from services.patches import (
    extract_patch,
    feature_to_patch,
    frame_tensor,
    needs_padding,
    patch_to_feature,
)


def test_patch_scale_and_center():
    """测试 20×45 的目标裁剪边长为 150，缩放到 288 后比例为 1.92，目标中心位于图像块中心"""
    frame = np.zeros((400, 400, 3), dtype=np.uint8)
    box = BoundingBox(cx=200, cy=180, w=20, h=45)
    patch, transform = extract_patch(frame, box, area_factor=5.0, out_size=288)
    assert patch.shape == (288, 288, 3)
    assert transform.scale == pytest.approx(1.92)
    center = transform.frame_to_patch(box)
    assert (center.cx, center.cy) == pytest.approx((144.0, 144.0))
    assert center.w == pytest.approx(20 * 1.92)
    assert not needs_padding(frame.shape, transform, 288)


def test_patch_outside_frame_is_zero_padded():
    """测试超出图像的区域填零"""
    frame = np.full((100, 100, 3), 255, dtype=np.uint8)
    patch, transform = extract_patch(frame, BoundingBox(cx=5, cy=50, w=20, h=20), area_factor=5.0, out_size=50)
    assert needs_padding(frame.shape, transform, 50)
    assert float(patch[25, 0].max()) == 0.0
    assert float(patch[25, 49].min()) == pytest.approx(1.0)


def test_constant_frame_gives_constant_patch():
    """测试常数图像内部裁剪得到同一常数"""
    frame = np.full((120, 160, 3), 51, dtype=np.uint8)
    patch, _ = extract_patch(frame, BoundingBox(cx=80, cy=60, w=10, h=10), area_factor=4.0, out_size=32)
    assert torch.allclose(patch, torch.full_like(patch, 0.2))


def test_coordinate_round_trip():
    """测试原图与图像块、图像块与特征单元坐标的往返转换"""
    frame = np.zeros((300, 300, 3), dtype=np.uint8)
    _, transform = extract_patch(frame, BoundingBox(cx=120, cy=140, w=30, h=24), out_size=96)
    box = BoundingBox(cx=131.5, cy=127.25, w=17.0, h=33.0)
    back = transform.patch_to_frame(transform.frame_to_patch(box))
    assert (back.cx, back.cy, back.w, back.h) == pytest.approx((box.cx, box.cy, box.w, box.h))
    assert transform.point_to_frame(*transform.point_to_patch(10.0, 20.0)) == pytest.approx((10.0, 20.0))

    assert feature_to_patch(0, 16) == 8.0
    assert patch_to_feature(feature_to_patch(3.25, 16), 16) == pytest.approx(3.25)


def test_frame_tensor_and_invalid_inputs():
    """测试 uint8 图像转换到 [0, 1] 以及非法输入报错"""
    t = frame_tensor(np.array([[[0, 255, 51]]], dtype=np.uint8))
    assert t.tolist() == pytest.approx([[[0.0, 1.0, 0.2]]])
    with pytest.raises(ValueError):
        extract_patch(np.zeros((0, 0, 3), dtype=np.uint8), BoundingBox(cx=1, cy=1, w=1, h=1))
    with pytest.raises(ValueError):
        extract_patch(np.zeros((10, 10, 3), dtype=np.uint8), BoundingBox(cx=5, cy=5, w=2, h=2), out_size=0)
