import math
import time
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict

from models.box import BoundingBox
from models.errors import ModelFormatError
from models.features import ModulationVector
from models.sequence import Sequence
from models.tracking import LabelConfig, TrackerConfig, TrackOutput
from services.autodiff import Tape
from services.backbone import CLASSIFIER_BLOCK, FEATURE_STRIDES, Backbone
from services.box_refine import refine_boxes
from services.classifier import (
    ClassifierWeights,
    SampleMemory,
    augment_first_frame,
    classify,
    make_label,
    train_initial,
    train_update,
)
from services.iou_net import IoUNet
from services.patches import CropTransform, extract_patch, feature_to_patch, patch_to_feature


class TrackerState(BaseModel):
    """单个序列的全部可变状态"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    box: BoundingBox
    cls: Optional[ClassifierWeights] = None
    memory: SampleMemory
    modulation: Optional[ModulationVector] = None
    frame_index: int = 0
    lost: bool = False
    rng: torch.Generator
    # 分类器优化使用的微分带，其计数即 BackProp 调用次数
    tape: Tape
    # 首帧目标宽高比（多尺度变体保持不变）
    aspect: float = 1.0


def detect_distractor(score_map: torch.Tensor, ratio: float = 0.5, radius: float = 0.2) -> bool:
    """是否存在干扰峰：另一个局部极大值超过主峰的 ratio 倍，且距主峰超过边长的 radius 倍"""
    scores = score_map.detach()
    primary = float(scores.max())
    if primary <= 0:
        return False
    height, width = scores.shape
    row, col = divmod(int(torch.argmax(scores)), width)
    pooled = F.max_pool2d(scores[None, None], kernel_size=3, stride=1, padding=1)[0, 0]
    peaks = (scores == pooled) & (scores > ratio * primary)
    rows, cols = torch.nonzero(peaks, as_tuple=True)
    dist = torch.sqrt((rows - row).to(scores.dtype) ** 2 + (cols - col).to(scores.dtype) ** 2)
    return bool((dist > radius * max(height, width)).any())


class Tracker:
    """分类 + 目标估计的在线跟踪器

    分类器负责粗定位，IoU 网络通过梯度上升细化框，样本集合与分类器权重在线更新。
    """

    def __init__(self, backbone: Backbone, iou_net: Optional[IoUNet], config: TrackerConfig, seed: int = 0,
                 classifier: Optional[ClassifierWeights] = None):
        if iou_net is None and not config.multi_scale:
            raise ValueError("an IoU network is required unless the multi-scale variant is selected")
        self.backbone = backbone
        self.iou_net = iou_net
        self.config = config
        self.seed = seed
        self.stride = FEATURE_STRIDES[CLASSIFIER_BLOCK]
        # 模型文件中保存的分类器权重，作为首帧训练的起点
        self.classifier = classifier
        # 最近一次 run 结束时的状态
        self.last_state: Optional[TrackerState] = None

    # ------------------------------------------------------------------
    # 工具函数
    # ------------------------------------------------------------------

    @property
    def search_area_factor(self) -> float:
        if not self.config.use_classifier and not self.config.multi_scale:
            return self.config.no_classifier_area_factor
        return self.config.area_factor

    def _label(self, transform: CropTransform, box: BoundingBox, side: int) -> torch.Tensor:
        px, py = transform.point_to_patch(box.cx, box.cy)
        center = (patch_to_feature(px, self.stride), patch_to_feature(py, self.stride))
        return make_label(center, LabelConfig.for_map(side, self.config.label_sigma_factor), (side, side))

    def _optimizer_kwargs(self) -> dict:
        cfg = self.config
        return dict(method=cfg.optimizer, gd_lr=cfg.gd_lr, gd_momentum=cfg.gd_momentum, gdpp_factor=cfg.gdpp_factor)

    def _update(self, state: TrackerState) -> None:
        train_update(state.memory, state.cls, n_gn=self.config.update_gn, n_cg=self.config.update_cg,
                     tape=state.tape, **self._optimizer_kwargs())

    def _peak(self, scores: torch.Tensor) -> Tuple[int, int, float]:
        index = int(torch.argmax(scores))
        row, col = divmod(index, scores.shape[-1])
        return row, col, float(scores.reshape(-1)[index])

    def _output(self, state: TrackerState, box: BoundingBox, confidence: float, calls_before: int,
                hard_negative: bool = False, ascent_calls: int = 0) -> TrackOutput:
        return TrackOutput(frame_index=state.frame_index, box=box, confidence=confidence, lost=state.lost,
                           backprop_calls=state.tape.backprop_calls - calls_before, ascent_calls=ascent_calls,
                           hard_negative=hard_negative)

    # ------------------------------------------------------------------
    # 初始化
    # ------------------------------------------------------------------

    def _first_frame(self, frame: np.ndarray, box: BoundingBox):
        """首帧图像块、增广样本及其骨干特征（一次批量前向）"""
        cfg = self.config
        patch, transform = extract_patch(frame, box, cfg.area_factor, cfg.patch_size)
        samples = augment_first_frame(patch, n=cfg.init_samples, seed=self.seed)
        feats = self.backbone(torch.stack([s.image for s in samples]))
        return transform, samples, feats

    def _initial_samples(self, transform: CropTransform, samples, feats,
                         box: BoundingBox) -> Tuple[SampleMemory, ClassifierWeights]:
        """每个增广样本以其（平移后的）目标中心为标签，组成等权重的初始样本集合"""
        cfg = self.config
        x = feats[CLASSIFIER_BLOCK]
        side = x.shape[1]
        labels = []
        for s in samples:
            shifted = box.with_center(box.cx + s.offset[0] / transform.scale, box.cy + s.offset[1] / transform.scale)
            labels.append(self._label(transform, shifted, side))
        memory = SampleMemory(capacity=cfg.memory_capacity, learning_rate=cfg.memory_lr)
        memory.seed(list(x), labels)
        if self.classifier is None:
            weights = ClassifierWeights.create(x.shape[-1], cfg.cls_out_dim, cfg.cls_kernel,
                                               cfg.cls_lambda1, cfg.cls_lambda2, seed=self.seed)
        else:
            weights = self._stored_classifier(x.shape[-1])
        return memory, weights

    def _stored_classifier(self, in_dim: int) -> ClassifierWeights:
        """按当前配置校验保存的分类器权重，返回带配置正则系数的副本"""
        cfg = self.config
        w1, w2 = self.classifier.w1, self.classifier.w2
        expected = ((1, 1, in_dim, cfg.cls_out_dim), (cfg.cls_kernel, cfg.cls_kernel, cfg.cls_out_dim, 1))
        if (tuple(w1.shape), tuple(w2.shape)) != expected:
            logger.error(f"Stored classifier shapes {tuple(w1.shape)}, {tuple(w2.shape)} do not match {expected}")
            raise ModelFormatError(f"stored classifier weights have shapes {tuple(w1.shape)}, {tuple(w2.shape)}, "
                                   f"tracker configuration expects {expected[0]}, {expected[1]}")
        dtype = torch.get_default_dtype()
        return ClassifierWeights(w1=w1.detach().clone().to(dtype), w2=w2.detach().clone().to(dtype),
                                 lambda1=cfg.cls_lambda1, lambda2=cfg.cls_lambda2)

    def first_frame_problem(self, frame: np.ndarray, box: BoundingBox) -> Tuple[SampleMemory, ClassifierWeights]:
        """首帧分类器优化问题（未训练的权重 + 初始样本），供收敛性对比使用"""
        transform, samples, feats = self._first_frame(frame, box)
        return self._initial_samples(transform, samples, feats, box)

    def initialize(self, frame: np.ndarray, box: BoundingBox) -> Tuple[TrackerState, TrackOutput]:
        """首帧：数据增广得到初始样本，训练分类器并预计算调制向量

        Returns:
            (跟踪状态, 第 0 帧输出)
        """
        cfg = self.config
        transform, samples, feats = self._first_frame(frame, box)
        state = TrackerState(box=box, memory=SampleMemory(cfg.memory_capacity, cfg.memory_lr),
                             rng=torch.Generator().manual_seed(self.seed), tape=Tape("classifier"),
                             aspect=box.aspect)

        if self.iou_net is not None and not cfg.multi_scale:
            self.iou_net.eval()
            box_patch = transform.frame_to_patch(box).to_tensor(samples[0].image.dtype).reshape(1, 4)
            with torch.no_grad():
                state.modulation = self.iou_net.reference({b: f[:1] for b, f in feats.items()}, box_patch).detached()

        if cfg.use_classifier or cfg.multi_scale:
            state.memory, state.cls = self._initial_samples(transform, samples, feats, box)
            train_initial(state.memory, state.cls, n_gn=cfg.init_gn, n_cg=cfg.init_cg, tape=state.tape,
                          **self._optimizer_kwargs())
        logger.info(f"Tracker initialized ({cfg.variant_name}) at {box.to_xywh()}, "
                    f"{state.tape.backprop_calls} backprop calls")
        return state, self._output(state, box, 1.0, 0)

    # ------------------------------------------------------------------
    # 跟踪
    # ------------------------------------------------------------------

    def _proposals(self, state: TrackerState, center_box: BoundingBox) -> torch.Tensor:
        """初始框 B 及其均匀扰动（中心 ±noise·(w, h)，对数尺寸 ±noise），第 0 个为 B 本身"""
        cfg = self.config
        n = cfg.proposals
        base = center_box.to_tensor().reshape(1, 4).repeat(n, 1)
        u = torch.rand(n - 1, 4, generator=state.rng, dtype=base.dtype) * 2.0 - 1.0
        base[1:, 0] += u[:, 0] * cfg.proposal_center_noise * center_box.w
        base[1:, 1] += u[:, 1] * cfg.proposal_center_noise * center_box.h
        base[1:, 2] *= torch.exp(u[:, 2] * cfg.proposal_size_noise)
        base[1:, 3] *= torch.exp(u[:, 3] * cfg.proposal_size_noise)
        return base

    def _estimate(self, state: TrackerState, feats, transform: CropTransform,
                  initial: BoundingBox) -> Tuple[BoundingBox, float, int]:
        """proposals → 梯度上升 → 预测 IoU 最高的 top-k 取均值

        Returns:
            (原图坐标的框, top-k 平均预测值, 上升的 BackProp 调用次数)
        """
        cfg = self.config
        net = self.iou_net
        net.eval()
        with torch.no_grad():
            test_feats = net.test_features(feats)
        proposals = self._proposals(state, transform.frame_to_patch(initial))
        tape = Tape("ascent")
        refined, trace = refine_boxes(net, state.modulation, test_feats, proposals.unsqueeze(0),
                                      steps=cfg.ascent_steps, step_len=cfg.ascent_step_len,
                                      parametrization=cfg.ascent_parametrization, tape=tape)
        scores = trace[-1][0]
        top = torch.topk(scores, cfg.top_k).indices
        mean_box = refined[0, top].mean(dim=0)
        mean_box[2:] = mean_box[2:].clamp(min=1.0)
        return (transform.patch_to_frame(BoundingBox.from_tensor(mean_box)), float(scores[top].mean()),
                tape.backprop_calls)

    def track_frame(self, state: TrackerState, frame: np.ndarray) -> TrackOutput:
        """完整跟踪流程：分类器定位 → IoU 网络细化 → 加入样本 → 周期性更新"""
        cfg = self.config
        calls_before = state.tape.backprop_calls
        state.frame_index += 1
        patch, transform = extract_patch(frame, state.box, cfg.area_factor, cfg.patch_size)
        feats = self.backbone(patch.unsqueeze(0))
        x = feats[CLASSIFIER_BLOCK][0]
        with torch.no_grad():
            scores = classify(x, state.cls)
        row, col, confidence = self._peak(scores)

        if confidence < cfg.lost_threshold:
            state.lost = True
            logger.debug(f"frame {state.frame_index}: target lost (confidence {confidence:.3f})")
            return self._output(state, state.box, confidence, calls_before)
        state.lost = False

        cx, cy = transform.point_to_frame(feature_to_patch(col, self.stride), feature_to_patch(row, self.stride))
        box, _, ascent_calls = self._estimate(state, feats, transform, state.box.with_center(cx, cy))
        state.box = box

        label = self._label(transform, box, scores.shape[0])
        hard_negative = self.hard_negative_step(state, scores, x, label)
        if not hard_negative:
            state.memory.add_sample(x, label)
            if state.frame_index % cfg.update_interval == 0:
                self._update(state)
        return self._output(state, box, confidence, calls_before, hard_negative, ascent_calls)

    def hard_negative_step(self, state: TrackerState, score_map: torch.Tensor,
                           x: Optional[torch.Tensor] = None, label: Optional[torch.Tensor] = None) -> bool:
        """检测到干扰峰时以双倍学习率加入当前样本并立即优化一轮"""
        cfg = self.config
        if not cfg.use_hard_negative or state.cls is None:
            return False
        if not detect_distractor(score_map, cfg.hn_ratio, cfg.hn_radius):
            return False
        logger.debug(f"frame {state.frame_index}: distractor peak detected, hard negative update")
        if x is not None and label is not None:
            state.memory.add_sample(x, label, boost=cfg.hn_boost)
        self._update(state)
        return True

    def multi_scale_track(self, state: TrackerState, frame: np.ndarray) -> TrackOutput:
        """仅用分类器在 5 个尺度上搜索位置与尺度，宽高比保持首帧不变"""
        cfg = self.config
        calls_before = state.tape.backprop_calls
        state.frame_index += 1
        half = cfg.multi_scale_count // 2
        factors = [cfg.multi_scale_ratio ** k for k in range(-half, cfg.multi_scale_count - half)]
        crops = [extract_patch(frame, state.box.scaled(f), cfg.area_factor, cfg.patch_size) for f in factors]
        feats = self.backbone(torch.stack([p for p, _ in crops]))
        x = feats[CLASSIFIER_BLOCK]
        with torch.no_grad():
            scores = classify(x, state.cls)
        best = int(torch.argmax(scores.reshape(len(factors), -1).max(dim=1).values))
        row, col, confidence = self._peak(scores[best])

        if confidence < cfg.lost_threshold:
            state.lost = True
            return self._output(state, state.box, confidence, calls_before)
        state.lost = False

        transform = crops[best][1]
        cx, cy = transform.point_to_frame(feature_to_patch(col, self.stride), feature_to_patch(row, self.stride))
        size = state.box.size * factors[best]
        w, h = size * math.sqrt(state.aspect), size / math.sqrt(state.aspect)
        box = BoundingBox(cx=cx, cy=cy, w=max(w, 1.0), h=max(h, 1.0))
        state.box = box

        label = self._label(transform, box, scores.shape[1])
        hard_negative = self.hard_negative_step(state, scores[best], x[best], label)
        if not hard_negative:
            state.memory.add_sample(x[best], label)
            if state.frame_index % cfg.update_interval == 0:
                self._update(state)
        return self._output(state, box, confidence, calls_before, hard_negative)

    def estimation_only_track(self, state: TrackerState, frame: np.ndarray) -> TrackOutput:
        """不使用分类器：以上一帧框为初始框，在更大的搜索区域内只做目标估计"""
        cfg = self.config
        calls_before = state.tape.backprop_calls
        state.frame_index += 1
        patch, transform = extract_patch(frame, state.box, cfg.no_classifier_area_factor, cfg.patch_size)
        feats = self.backbone(patch.unsqueeze(0))
        box, predicted, ascent_calls = self._estimate(state, feats, transform, state.box)
        state.box = box
        state.lost = False
        confidence = min(1.0, max(0.0, (predicted + 1.0) / 2.0))
        return self._output(state, box, confidence, calls_before, ascent_calls=ascent_calls)

    def track(self, state: TrackerState, frame: np.ndarray) -> TrackOutput:
        """按变体开关分派到对应的跟踪流程"""
        if self.config.multi_scale:
            return self.multi_scale_track(state, frame)
        if not self.config.use_classifier:
            return self.estimation_only_track(state, frame)
        return self.track_frame(state, frame)

    def run(self, sequence: Sequence, outputs: Optional[List[TrackOutput]] = None,
            frame_times: Optional[List[float]] = None) -> List[TrackOutput]:
        """跟踪整个序列，首帧用真值初始化

        outputs / frame_times 若给出则逐帧追加，序列中途出错时调用方仍能拿到部分轨迹。
        """
        outputs = outputs if outputs is not None else []
        frame_times = frame_times if frame_times is not None else []
        start = time.perf_counter()
        state, first = self.initialize(sequence.frame(0), sequence.ground_truth[0])
        self.last_state = state
        frame_times.append(time.perf_counter() - start)
        outputs.append(first)
        for i in range(1, len(sequence)):
            start = time.perf_counter()
            outputs.append(self.track(state, sequence.frame(i)))
            frame_times.append(time.perf_counter() - start)
        lost = sum(o.lost for o in outputs)
        logger.info(f"Sequence {sequence.name} finished: {len(outputs)} frames, {lost} lost")
        return outputs
