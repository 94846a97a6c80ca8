import math

import pytest
import torch
import torch.nn.functional as F

from models.box import BoundingBox
from models.errors import DegenerateBoxError, NonFiniteError
from services.prpool import bilinear_at, box_decode, box_encode, pool_regions, prpool


def test_bilinear_at_grid_points_and_center(f64):
    """测试整数格点返回存储值，2×2 区域中心为四个值的平均 1.5"""
    fmap = torch.arange(4, dtype=f64).reshape(2, 2, 1)
    assert float(bilinear_at(fmap, 1.0, 0.0)) == 1.0
    assert float(bilinear_at(fmap, 0.5, 0.5)) == pytest.approx(1.5)
    const = torch.full((4, 5, 2), 3.0, dtype=f64)
    assert torch.allclose(bilinear_at(const, 2.3, 1.7), torch.full((2,), 3.0, dtype=f64))


def test_constant_map_pools_to_constant(f64):
    """测试常数特征图上任意框的每个区间都等于该常数"""
    fmap = torch.full((8, 9, 3), 2.5, dtype=f64)
    pooled = prpool(fmap, BoundingBox(cx=4.1, cy=3.7, w=3.3, h=2.2), k=3)
    assert pooled.k == 3 and pooled.channels == 3
    assert torch.allclose(pooled.data, torch.full((3, 3, 3), 2.5, dtype=f64))


def test_integer_aligned_box_matches_average_pooling(f64):
    """测试整数对齐且边长为 K 倍数的框等于对应区域（单元均值）的平均池化"""
    fmap = torch.randn(10, 12, 4, dtype=f64)
    k = 2
    # 区域 x ∈ [2, 6], y ∈ [3, 7]，每个区间覆盖 2×2 个单位单元
    box = BoundingBox.from_corners(2.0, 3.0, 6.0, 7.0)
    pooled = prpool(fmap, box, k).data
    # 双线性曲面在单位单元上的积分是四个角点的平均
    cells = 0.25 * (fmap[:-1, :-1] + fmap[1:, :-1] + fmap[:-1, 1:] + fmap[1:, 1:])
    region = cells[3:7, 2:6].permute(2, 0, 1).unsqueeze(0)
    expected = F.avg_pool2d(region, kernel_size=2)[0].permute(1, 2, 0)
    assert torch.allclose(pooled, expected, atol=1e-12)


def test_box_gradient_matches_finite_differences(f64):
    """测试池化结果对框坐标 (cx, cy, w, h) 的梯度与中心差分一致"""
    fmap = torch.randn(7, 8, 2, dtype=f64)
    box = torch.tensor([3.6, 2.9, 3.3, 2.7], dtype=f64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda b: pool_regions(fmap.unsqueeze(0), b.reshape(1, 1, 4), 2),
                                     (box,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_batched_pooling_with_scale_and_offset(f64):
    """测试批量池化：spatial_scale 与 offset 等价于先变换框坐标"""
    feats = torch.randn(2, 6, 6, 3, dtype=f64)
    boxes = torch.tensor([[[20.0, 24.0, 16.0, 12.0]], [[30.0, 18.0, 10.0, 20.0]]], dtype=f64)
    out = pool_regions(feats, boxes, 3, spatial_scale=1.0 / 8, offset=-0.5)
    assert out.shape == (2, 1, 3, 3, 3)
    scaled = boxes.clone()
    scaled[..., :2] = boxes[..., :2] / 8 - 0.5
    scaled[..., 2:] = boxes[..., 2:] / 8
    assert torch.allclose(out, pool_regions(feats, scaled, 3))


def test_degenerate_and_non_finite_boxes_rejected(f64):
    """测试退化框与非有限坐标报错"""
    fmap = torch.zeros(4, 4, 1, dtype=f64)
    with pytest.raises(DegenerateBoxError):
        prpool(fmap, torch.tensor([1.0, 1.0, 0.0, 2.0], dtype=f64), 2)
    with pytest.raises(NonFiniteError):
        prpool(fmap, torch.tensor([math.nan, 1.0, 1.0, 2.0], dtype=f64), 2)
    with pytest.raises(ValueError):
        prpool(fmap, BoundingBox(cx=1, cy=1, w=1, h=1), 0)


def test_box_encoding():
    """测试框编码：往返不变，(0,0,1,1) 编码为零，宽度单调"""
    box = BoundingBox(cx=10, cy=20, w=4, h=8)
    back = box_decode(box_encode(box))
    assert back.cx == pytest.approx(10) and back.cy == pytest.approx(20)
    assert back.w == pytest.approx(4) and back.h == pytest.approx(8)
    assert box_encode(BoundingBox(cx=0, cy=0, w=1, h=1)).tolist() == [0.0, 0.0, 0.0, 0.0]
    assert box_encode(BoundingBox(cx=0, cy=0, w=2, h=1))[2] < box_encode(BoundingBox(cx=0, cy=0, w=3, h=1))[2]


def test_translation_consistency(f64):
    """测试特征图内容与框同时平移整数格后，各区间值不变"""
    fmap = torch.randn(8, 9, 3, dtype=f64)
    shifted = torch.zeros(12, 14, 3, dtype=f64)
    dy, dx = 3, 4
    shifted[dy:dy + 8, dx:dx + 9] = fmap
    box = torch.tensor([4.3, 3.6, 3.7, 2.9], dtype=f64)
    moved = box + torch.tensor([dx, dy, 0.0, 0.0], dtype=f64)
    assert torch.allclose(prpool(fmap, box, 3).data, prpool(shifted, moved, 3).data, atol=1e-12)


def test_whole_map_single_bin_is_global_mean(f64):
    """测试 K = 1 且框覆盖整个采样网格时，结果等于双线性曲面在整幅图上的平均值"""
    fmap = torch.randn(6, 7, 2, dtype=f64)
    box = BoundingBox.from_corners(0.0, 0.0, 6.0, 5.0)
    pooled = prpool(fmap, box, 1).data[0, 0]
    cells = 0.25 * (fmap[:-1, :-1] + fmap[1:, :-1] + fmap[:-1, 1:] + fmap[1:, 1:])
    assert torch.allclose(pooled, cells.mean(dim=(0, 1)), atol=1e-12)

    const = torch.full((6, 7, 2), -1.25, dtype=f64)
    assert torch.allclose(prpool(const, box, 1).data, torch.full((1, 1, 2), -1.25, dtype=f64))
