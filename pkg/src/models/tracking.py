from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from models.box import BoundingBox

OptimizerKind = Literal["gncg", "gd", "gd++"]


class LabelConfig(BaseModel):
    """高斯标签配置：sigma 以得分图单元为单位，峰值固定为 1"""

    sigma: float = Field(..., gt=0)
    amplitude: float = 1.0

    @classmethod
    def for_map(cls, side: int, factor: float = 1.0 / 12.0) -> "LabelConfig":
        """sigma 取得分图边长的固定比例"""
        return cls(sigma=side * factor)


class OptimizerRun(BaseModel):
    """一次在线优化的迭代设置与损失轨迹

    loss_trace 中每一项为 (累计 BackProp 调用次数, 损失值)。
    """

    n_gn: int = Field(1, ge=1)
    n_cg: int = Field(1, ge=1)
    method: OptimizerKind = "gncg"
    loss_trace: List[Tuple[int, float]] = Field(default_factory=list)
    backprop_calls: int = 0

    @property
    def expected_calls(self) -> int:
        """算法结构决定的调用次数 N_GN·(1 + 2·N_CG)"""
        return self.n_gn * (1 + 2 * self.n_cg)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.loss_trace[0][1] if self.loss_trace else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_trace[-1][1] if self.loss_trace else None


class TrackerConfig(BaseModel):
    """跟踪器超参数与消融开关"""

    patch_size: int = Field(288, gt=0)
    area_factor: float = Field(5.0, gt=0)
    proposals: int = Field(10, gt=0)
    ascent_steps: int = Field(5, ge=0)
    ascent_step_len: float = Field(1.0, gt=0)
    ascent_parametrization: Literal["scaled", "log"] = "scaled"
    top_k: int = Field(3, gt=0)
    update_interval: int = Field(10, gt=0)
    lost_threshold: float = Field(0.25, gt=0)
    hn_boost: float = Field(2.0, gt=0)
    hn_ratio: float = Field(0.5, gt=0)
    hn_radius: float = Field(0.2, gt=0)
    proposal_center_noise: float = Field(0.1, gt=0)
    proposal_size_noise: float = Field(0.1, gt=0)
    init_samples: int = Field(30, gt=0)
    init_gn: int = Field(6, gt=0)
    init_cg: int = Field(10, gt=0)
    update_gn: int = Field(1, gt=0)
    update_cg: int = Field(5, gt=0)
    label_sigma_factor: float = Field(1.0 / 12.0, gt=0)
    no_classifier_area_factor: float = Field(6.0, gt=0)
    multi_scale_ratio: float = Field(1.02, gt=0)
    multi_scale_count: int = Field(5, gt=0)
    gd_lr: float = Field(0.5, gt=0)
    gd_momentum: float = Field(0.9, ge=0)
    gdpp_factor: int = Field(5, gt=0)
    cls_out_dim: int = Field(64, gt=0)
    cls_kernel: int = Field(4, gt=0)
    cls_lambda1: float = Field(1e-2, ge=0)
    cls_lambda2: float = Field(1e-2, ge=0)
    memory_capacity: int = Field(50, gt=0)
    memory_lr: float = Field(0.01, gt=0, lt=1)

    # 消融开关
    use_classifier: bool = True
    use_hard_negative: bool = True
    multi_scale: bool = False
    optimizer: OptimizerKind = "gncg"

    @model_validator(mode="after")
    def _check_top_k(self) -> "TrackerConfig":
        if self.top_k > self.proposals:
            raise ValueError(f"top_k ({self.top_k}) must not exceed proposals ({self.proposals})")
        return self

    @classmethod
    def from_settings(cls, settings, **overrides) -> "TrackerConfig":
        values = dict(
            patch_size=settings.PATCH_SIZE,
            area_factor=settings.AREA_FACTOR,
            proposals=settings.PROPOSALS,
            ascent_steps=settings.ASCENT_STEPS,
            ascent_step_len=settings.ASCENT_STEP_LEN,
            ascent_parametrization=settings.ASCENT_PARAMETRIZATION,
            top_k=settings.TOP_K,
            update_interval=settings.UPDATE_INTERVAL,
            lost_threshold=settings.LOST_THRESHOLD,
            hn_boost=settings.HN_BOOST,
            hn_ratio=settings.HN_RATIO,
            hn_radius=settings.HN_RADIUS,
            proposal_center_noise=settings.PROPOSAL_CENTER_NOISE,
            proposal_size_noise=settings.PROPOSAL_SIZE_NOISE,
            init_samples=settings.INIT_SAMPLES,
            init_gn=settings.INIT_GN,
            init_cg=settings.INIT_CG,
            update_gn=settings.UPDATE_GN,
            update_cg=settings.UPDATE_CG,
            label_sigma_factor=settings.LABEL_SIGMA_FACTOR,
            no_classifier_area_factor=settings.NO_CLASSIF_AREA_FACTOR,
            multi_scale_ratio=settings.MULTI_SCALE_RATIO,
            multi_scale_count=settings.MULTI_SCALE_COUNT,
            gd_lr=settings.GD_LR,
            gd_momentum=settings.GD_MOMENTUM,
            gdpp_factor=settings.GDPP_FACTOR,
            cls_out_dim=settings.CLS_OUT_DIM,
            cls_kernel=settings.CLS_KERNEL,
            cls_lambda1=settings.CLS_LAMBDA1,
            cls_lambda2=settings.CLS_LAMBDA2,
            memory_capacity=settings.MEMORY_CAPACITY,
            memory_lr=settings.MEMORY_LR,
            use_classifier=settings.USE_CLASSIFIER,
            use_hard_negative=settings.USE_HARD_NEGATIVE,
            multi_scale=settings.MULTI_SCALE,
            optimizer=settings.OPTIMIZER,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def variant_name(self) -> str:
        """消融表中的变体名称"""
        if self.multi_scale:
            return "multi-scale"
        if not self.use_classifier:
            return "no-classifier"
        if self.optimizer != "gncg":
            return self.optimizer
        if not self.use_hard_negative:
            return "no-hn"
        return "full"


class IoUTrainingConfig(BaseModel):
    """IoU 网络离线训练配置"""

    epochs: int = Field(40, gt=0)
    batch: int = Field(64, gt=0)
    batches_per_epoch: int = Field(8, gt=0)
    lr: float = Field(1e-3, gt=0)
    decay: float = Field(0.2, gt=0)
    decay_step: int = Field(15, gt=0)
    candidates: int = Field(16, gt=0)
    min_iou: float = Field(0.1, ge=0, le=1)
    max_gap: int = Field(50, ge=0)
    patch_size: int = Field(288, gt=0)
    area_factor: float = Field(5.0, gt=0)
    color_jitter: float = Field(0.1, ge=0)
    center_jitter: float = Field(0.25, ge=0)
    scale_jitter: float = Field(0.25, ge=0)
    val_pairs: int = Field(128, gt=0)
    seed: int = 0

    @classmethod
    def from_settings(cls, settings, **overrides) -> "IoUTrainingConfig":
        values = dict(
            epochs=settings.IOU_EPOCHS,
            batch=settings.IOU_BATCH,
            batches_per_epoch=settings.IOU_BATCHES_PER_EPOCH,
            lr=settings.IOU_LR,
            decay=settings.IOU_LR_DECAY,
            decay_step=settings.IOU_LR_STEP,
            candidates=settings.IOU_CANDIDATES,
            min_iou=settings.IOU_MIN_IOU,
            max_gap=settings.IOU_MAX_GAP,
            patch_size=settings.PATCH_SIZE,
            area_factor=settings.AREA_FACTOR,
            color_jitter=settings.IOU_COLOR_JITTER,
            center_jitter=settings.IOU_CENTER_JITTER,
            scale_jitter=settings.IOU_SCALE_JITTER,
            val_pairs=settings.IOU_VAL_PAIRS,
            seed=settings.SEED,
        )
        values.update(overrides)
        return cls(**values)

    def lr_at(self, epoch: int) -> float:
        """阶梯式学习率：每 decay_step 个 epoch 乘以 decay"""
        return self.lr * self.decay ** (epoch // self.decay_step)


class TrackOutput(BaseModel):
    """单帧跟踪结果"""

    frame_index: int
    box: BoundingBox
    confidence: float
    lost: bool = False
    # 分类器优化的 BackProp 调用次数
    backprop_calls: int = 0
    # 目标估计梯度上升的 BackProp 调用次数
    ascent_calls: int = 0
    hard_negative: bool = False

    def csv_row(self) -> str:
        x, y, w, h = self.box.to_xywh()
        return f"{self.frame_index},{x:.4f},{y:.4f},{w:.4f},{h:.4f},{self.confidence:.6f},{int(self.lost)}"


class TrainingHistory(BaseModel):
    """IoU 网络离线训练的逐 epoch 记录，MSE 均在 [0, 1] 的 IoU 尺度上"""

    rows: List[Tuple[int, float, float]] = Field(default_factory=list)
    # 始终预测验证集平均 IoU 的常数预测器的 MSE
    baseline_mse: Optional[float] = None

    @property
    def final_val_mse(self) -> Optional[float]:
        return self.rows[-1][2] if self.rows else None

    def csv_lines(self) -> List[str]:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{e},{tr:.6f},{va:.6f}" for e, tr, va in self.rows]
        return lines
