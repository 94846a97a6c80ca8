import pytest
import torch

from models.tracking import TrackerConfig
from services.autodiff import precision
from services.backbone import Backbone
from services.benchmark import first_frame_problems
from services.classifier import ClassifierWeights, SampleMemory
from services.iou_net import IoUNet
from services.synth import category_spec, synth_sequence


@pytest.fixture
def f64():
    """在 64 位精度下运行测试"""
    with precision("f64") as dtype:
        yield dtype


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def tiny_backbone():
    return Backbone(widths=(4, 8, 8, 8), seed=0)


@pytest.fixture
def tiny_iou_net(tiny_backbone):
    return IoUNet(kind="modulation", in_channels=tiny_backbone.channels, dz=8, hidden=16,
                  ref_pool=2, test_pool=3, seed=0)


@pytest.fixture
def tiny_config():
    """小尺寸图像块的跟踪配置（得分图 6×6），迭代次数保持默认"""
    return TrackerConfig(patch_size=96, cls_out_dim=8, cls_kernel=2, init_samples=8, memory_capacity=20)


@pytest.fixture
def small_sequence():
    spec = category_spec("translation", 0, n_frames=6, frame_height=96, frame_width=128, seed=0)
    return synth_sequence(spec, seed=0)


@pytest.fixture
def static_sequence():
    spec = category_spec("static", 0, n_frames=4, frame_height=96, frame_width=128, seed=0)
    return synth_sequence(spec, seed=0)


@pytest.fixture
def first_frame_set(tiny_backbone, tiny_config):
    """20 个合成首帧分类器问题（初始样本 + 未训练权重），张量转换为 64 位"""
    problems = []
    for memory, weights in first_frame_problems(20, tiny_backbone, tiny_config, seed=0):
        converted = SampleMemory(capacity=memory.capacity, learning_rate=memory.learning_rate)
        converted.seed([x.double() for x in memory.features], [y.double() for y in memory.labels])
        problems.append((converted, ClassifierWeights(w1=weights.w1.double(), w2=weights.w2.double(),
                                                      lambda1=weights.lambda1, lambda2=weights.lambda2)))
    return problems
