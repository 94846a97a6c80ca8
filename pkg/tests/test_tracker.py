import pytest
import torch

from models.box import BoundingBox
from models.errors import ModelFormatError
from services.benchmark import track_and_evaluate
from services.classifier import ClassifierWeights
from services.tracker import Tracker, detect_distractor


def two_peak_map(second: float) -> torch.Tensor:
    scores = torch.zeros(18, 18)
    scores[4, 4] = 1.0
    scores[14, 13] = second
    return scores


def test_initialize_builds_memory_and_spends_init_budget(tiny_backbone, tiny_iou_net, tiny_config, small_sequence):
    """测试首帧：样本集合大小等于增广样本数，分类器优化 6·(1 + 2·10) = 126 次调用"""
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config)
    state, first = tracker.initialize(small_sequence.frame(0), small_sequence.ground_truth[0])
    assert len(state.memory) == tiny_config.init_samples == 8
    assert sum(state.memory.weights) == pytest.approx(1.0)
    assert state.tape.backprop_calls == 126
    assert state.modulation is not None
    assert first.box == small_sequence.ground_truth[0]
    assert first.confidence == 1.0


def test_frame_budget(tiny_backbone, tiny_iou_net, tiny_config, small_sequence):
    """测试每帧一次骨干前向，每次更新 1·(1 + 2·5) = 11 次调用，丢失帧不更新"""
    config = tiny_config.model_copy(update={"update_interval": 1})
    tracker = Tracker(tiny_backbone, tiny_iou_net, config)
    tiny_backbone.reset_counter()
    outputs = tracker.run(small_sequence)
    assert len(outputs) == len(small_sequence)
    assert tiny_backbone.calls == len(small_sequence)
    for out in outputs[1:]:
        assert out.backprop_calls == (0 if out.lost else 11)
        if out.lost:
            assert out.ascent_calls == 0
        else:
            assert 1 <= out.ascent_calls <= config.ascent_steps
        assert out.box.w >= 1.0 and out.box.h >= 1.0


def test_tracking_is_deterministic(tiny_backbone, tiny_iou_net, tiny_config, small_sequence):
    """测试相同种子两次运行得到逐位相同的轨迹"""
    first = Tracker(tiny_backbone, tiny_iou_net, tiny_config, seed=3).run(small_sequence)
    second = Tracker(tiny_backbone, tiny_iou_net, tiny_config, seed=3).run(small_sequence)
    assert [o.csv_row() for o in first] == [o.csv_row() for o in second]


def test_detect_distractor():
    """测试干扰峰检测：足够高且足够远的第二峰才算干扰"""
    assert detect_distractor(two_peak_map(0.8))
    assert not detect_distractor(two_peak_map(0.3))
    near = torch.zeros(18, 18)
    near[4, 4], near[4, 6] = 1.0, 0.9
    assert not detect_distractor(near)
    assert not detect_distractor(torch.zeros(5, 5))


def test_hard_negative_step(tiny_backbone, tiny_iou_net, tiny_config, static_sequence):
    """测试检测到干扰峰时立即优化一轮；关闭开关后从不触发"""
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config)
    state, _ = tracker.initialize(static_sequence.frame(0), static_sequence.ground_truth[0])
    before = state.tape.backprop_calls
    assert tracker.hard_negative_step(state, two_peak_map(0.8))
    assert state.tape.backprop_calls - before == 11
    assert not tracker.hard_negative_step(state, two_peak_map(0.3))

    no_hn = Tracker(tiny_backbone, tiny_iou_net, tiny_config.model_copy(update={"use_hard_negative": False}))
    state, _ = no_hn.initialize(static_sequence.frame(0), static_sequence.ground_truth[0])
    assert not no_hn.hard_negative_step(state, two_peak_map(0.8))
    outputs = no_hn.run(static_sequence)
    assert not any(o.hard_negative for o in outputs)


def test_multi_scale_keeps_aspect_ratio(tiny_backbone, tiny_config, small_sequence):
    """测试多尺度变体不需要 IoU 网络，输出框宽高比与首帧一致"""
    config = tiny_config.model_copy(update={"multi_scale": True})
    tracker = Tracker(tiny_backbone, None, config)
    tiny_backbone.reset_counter()
    outputs = tracker.run(small_sequence)
    assert tiny_backbone.calls == len(small_sequence)
    aspect = small_sequence.ground_truth[0].aspect
    for out in outputs:
        assert out.box.aspect == pytest.approx(aspect, rel=1e-6)


def test_estimation_only_variant(tiny_backbone, tiny_iou_net, tiny_config, small_sequence):
    """测试不使用分类器的变体：没有分类器优化调用但记录上升调用，置信度在 [0, 1] 内，从不判定丢失"""
    config = tiny_config.model_copy(update={"use_classifier": False})
    tracker = Tracker(tiny_backbone, tiny_iou_net, config)
    assert tracker.search_area_factor == config.no_classifier_area_factor
    state, _ = tracker.initialize(small_sequence.frame(0), small_sequence.ground_truth[0])
    assert state.cls is None and len(state.memory) == 0
    for i in range(1, len(small_sequence)):
        out = tracker.track(state, small_sequence.frame(i))
        assert 0.0 <= out.confidence <= 1.0
        assert not out.lost and out.backprop_calls == 0
        assert 1 <= out.ascent_calls <= config.ascent_steps


def test_iou_network_required(tiny_backbone, tiny_config):
    """测试除多尺度变体外缺少 IoU 网络时报错"""
    with pytest.raises(ValueError):
        Tracker(tiny_backbone, None, tiny_config)


def test_proposals_start_with_initial_box(tiny_backbone, tiny_iou_net, tiny_config, static_sequence):
    """测试第 0 个候选框为初始框本身，其余在给定扰动范围内"""
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config)
    state, _ = tracker.initialize(static_sequence.frame(0), static_sequence.ground_truth[0])
    box = BoundingBox(cx=40, cy=30, w=20, h=10)
    proposals = tracker._proposals(state, box)
    assert proposals.shape == (tiny_config.proposals, 4)
    assert proposals[0].tolist() == pytest.approx([40, 30, 20, 10])
    assert ((proposals[1:, 0] - 40).abs() <= 0.1 * 20 + 1e-5).all()
    assert ((proposals[1:, 2] / 20).log().abs() <= 0.1 + 1e-5).all()


def test_static_sequence_tracks_reasonably(tiny_backbone, tiny_iou_net, tiny_config, static_sequence):
    """测试静止目标：评测报告帧数正确且首帧 IoU 为 1"""
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config)
    report, outputs = track_and_evaluate(tracker, static_sequence)
    assert len(report.ious) == len(static_sequence) == len(outputs)
    assert report.ious[0] == pytest.approx(1.0)
    assert 0.0 <= report.auc <= 100.0


def test_stored_classifier_is_training_start(tiny_backbone, tiny_iou_net, tiny_config, static_sequence):
    """测试给定保存的分类器权重时，首帧优化从这些权重出发，正则系数取自配置"""
    stored = ClassifierWeights.create(tiny_backbone.channels["block4"], out_dim=tiny_config.cls_out_dim,
                                      kernel=tiny_config.cls_kernel, lambda1=5.0, lambda2=5.0, seed=11)
    stored.w2 = torch.full_like(stored.w2, 0.01)
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config, classifier=stored)
    _, weights = tracker.first_frame_problem(static_sequence.frame(0), static_sequence.ground_truth[0])
    assert torch.equal(weights.w1, stored.w1) and torch.equal(weights.w2, stored.w2)
    assert weights.lambda1 == tiny_config.cls_lambda1
    assert weights.w1 is not stored.w1

    outputs = tracker.run(static_sequence)
    assert len(outputs) == len(static_sequence)
    assert tracker.last_state.cls is not None
    assert torch.equal(stored.w2, torch.full_like(stored.w2, 0.01))


def test_stored_classifier_shape_mismatch(tiny_backbone, tiny_iou_net, tiny_config, static_sequence):
    """测试保存的分类器与当前配置形状不一致时抛出 ModelFormatError"""
    stored = ClassifierWeights.create(tiny_backbone.channels["block4"], out_dim=tiny_config.cls_out_dim + 1,
                                      kernel=tiny_config.cls_kernel)
    tracker = Tracker(tiny_backbone, tiny_iou_net, tiny_config, classifier=stored)
    with pytest.raises(ModelFormatError):
        tracker.initialize(static_sequence.frame(0), static_sequence.ground_truth[0])
