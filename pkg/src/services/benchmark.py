import time
from typing import Callable, Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, Field

from models.errors import ConvergenceError, TrackingError
from models.sequence import EvalReport, Sequence
from models.tracking import IoUTrainingConfig, TrackerConfig
from services import autodiff as ad
from services.autodiff import Tape, precision
from services.backbone import Backbone
from services.classifier import (
    PELU_ALPHA,
    ClassifierWeights,
    SampleMemory,
    classify,
    train_initial,
)
from services.iou_net import IOU_KINDS, IoUNet
from services.iou_training import SyntheticPairSampler, build_validation_set, train_offline
from services.metrics import evaluate_trajectory, merge_reports
from services.prpool import bilinear_at, pool_regions
from services.synth import SUITE_CATEGORIES, category_spec, synth_sequence
from services.tracker import Tracker

# 消融变体：名称 → TrackerConfig 覆盖项
VARIANTS: Dict[str, dict] = {
    "full": {},
    "multi-scale": {"multi_scale": True},
    "no-classifier": {"use_classifier": False},
    "gd": {"optimizer": "gd"},
    "gd++": {"optimizer": "gd++"},
    "no-hn": {"use_hard_negative": False},
}

CONVERGENCE_METHODS = ("gncg", "gd", "gd++")
GD_LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0)
GD_MOMENTUM_GRID = (0.0, 0.5, 0.9)


# ---------------------------------------------------------------------------
# 序列评测
# ---------------------------------------------------------------------------

def track_and_evaluate(
    tracker: Tracker,
    sequence: Sequence,
    precision_threshold: float = 20.0,
    norm_threshold: float = 0.2,
) -> Tuple[EvalReport, list]:
    """跟踪一个序列并评测；中途出错的序列按已有的部分轨迹计分

    Returns:
        (评测报告, 逐帧输出)
    """
    outputs, frame_times = [], []
    try:
        tracker.run(sequence, outputs, frame_times)
    except TrackingError as e:
        logger.error(f"Error tracking sequence {sequence.name} after {len(outputs)} frames: {str(e)}")
    report = evaluate_trajectory(sequence.name, [o.box for o in outputs], sequence.ground_truth,
                                 precision_threshold, norm_threshold, frame_times)
    return report, outputs


def evaluate_suite(
    tracker: Tracker,
    suite: Seq[Sequence],
    precision_threshold: float = 20.0,
    norm_threshold: float = 0.2,
) -> List[EvalReport]:
    """逐个序列跟踪与评测，报告按序列名排序"""
    reports = [track_and_evaluate(tracker, seq, precision_threshold, norm_threshold)[0] for seq in suite]
    return sorted(reports, key=lambda r: r.name)


def _subsets(suite: Seq[Sequence]) -> Dict[str, List[str]]:
    subsets = {"all": sorted(s.name for s in suite)}
    for category in SUITE_CATEGORIES:
        names = sorted(s.name for s in suite if s.category == category)
        if names:
            subsets[category] = names
    return subsets


# ---------------------------------------------------------------------------
# 消融实验
# ---------------------------------------------------------------------------

class AblationRow(BaseModel):
    """一个变体在一个子集上的多次运行平均结果"""

    variant: str
    subset: str
    runs: int
    op50: float
    op75: float
    auc: float
    auc_std: float = 0.0
    # 与 full 变体配对（相同种子）的 AUC 差的方差
    diff_var: Optional[float] = None


def run_ablation(
    suite: Seq[Sequence],
    variants: Seq[str],
    backbone: Backbone,
    iou_net: Optional[IoUNet],
    base_config: TrackerConfig,
    runs: int = 5,
    seed: int = 0,
    precision_threshold: float = 20.0,
    norm_threshold: float = 0.2,
) -> List[AblationRow]:
    """对每个变体运行 runs 次（第 r 次种子为 seed + r，各变体相同），按子集汇总 OP/AUC

    子集为 "all" 加上各合成类别。
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"Unknown ablation variants {unknown}, expected some of {list(VARIANTS)}")
    if runs < 1:
        raise ValueError(f"run_ablation: runs must be >= 1, got {runs}")
    subsets = _subsets(suite)
    # (variant, subset) → 每次运行的 (op50, op75, auc)
    results: Dict[Tuple[str, str], List[Tuple[float, float, float]]] = {}

    for variant in variants:
        config = base_config.model_copy(update=VARIANTS[variant])
        for r in range(runs):
            tracker = Tracker(backbone, iou_net, config, seed=seed + r)
            reports = {rep.name: rep for rep in evaluate_suite(tracker, suite, precision_threshold, norm_threshold)}
            for subset, names in subsets.items():
                merged = merge_reports(subset, [reports[n] for n in names])
                results.setdefault((variant, subset), []).append((merged.op50, merged.op75, merged.auc))
            logger.info(f"Ablation {variant} run {r + 1}/{runs}: AUC {results[(variant, 'all')][-1][2]:.2f}")

    rows = []
    for variant in variants:
        for subset in subsets:
            values = np.asarray(results[(variant, subset)])
            diff_var = None
            if variant != "full" and ("full", subset) in results:
                diff = values[:, 2] - np.asarray(results[("full", subset)])[:, 2]
                diff_var = float(diff.var())
            rows.append(AblationRow(
                variant=variant,
                subset=subset,
                runs=runs,
                op50=float(values[:, 0].mean()),
                op75=float(values[:, 1].mean()),
                auc=float(values[:, 2].mean()),
                auc_std=float(values[:, 2].std()),
                diff_var=diff_var,
            ))
    return rows


ABLATION_COLUMNS = ("variant", "subset", "runs", "op50", "op75", "auc", "auc_std", "diff_var")


def _cells(row: AblationRow) -> List[str]:
    diff = "" if row.diff_var is None else f"{row.diff_var:.4f}"
    return [row.variant, row.subset, str(row.runs), f"{row.op50:.2f}", f"{row.op75:.2f}",
            f"{row.auc:.2f}", f"{row.auc_std:.2f}", diff]


def ablation_csv(rows: Seq[AblationRow]) -> str:
    lines = [",".join(ABLATION_COLUMNS)] + [",".join(_cells(r)) for r in rows]
    return "\n".join(lines) + "\n"


def ablation_table(rows: Seq[AblationRow]) -> str:
    """等宽对齐的文本表格"""
    cells = [list(ABLATION_COLUMNS)] + [_cells(r) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(ABLATION_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# 收敛性对比：GN-CG vs GD vs GD++
# ---------------------------------------------------------------------------

class ConvergenceReport(BaseModel):
    """各方法按 BackProp 调用次数对齐后的平均 / 中位损失轨迹"""

    # method → [(calls, mean_loss, median_loss)]
    traces: Dict[str, List[Tuple[int, float, float]]] = Field(default_factory=dict)
    gd_lr: float
    gd_momentum: float
    problems: int

    def final_median(self, method: str) -> float:
        return self.traces[method][-1][2]

    def loss_at(self, method: str, calls: int) -> float:
        """在给定调用次数处的中位损失（阶梯插值）"""
        value = self.traces[method][0][2]
        for c, _, median in self.traces[method]:
            if c > calls:
                break
            value = median
        return value

    def csv_lines(self) -> List[str]:
        lines = ["method,backprop_calls,loss,median_loss"]
        for method, trace in self.traces.items():
            lines += [f"{method},{c},{mean:.8g},{median:.8g}" for c, mean, median in trace]
        return lines


def first_frame_problems(n_problems: int, backbone: Backbone, config: TrackerConfig,
                         seed: int = 0) -> List[Tuple[SampleMemory, ClassifierWeights]]:
    """由合成序列首帧构造的分类器优化问题（初始样本 + 未训练权重）"""
    if n_problems < 1:
        raise ValueError(f"first_frame_problems: need at least one problem, got {n_problems}")
    problems = []
    for i in range(n_problems):
        category = SUITE_CATEGORIES[i % len(SUITE_CATEGORIES)]
        seq = synth_sequence(category_spec(category, i, n_frames=1, seed=seed), seed=seed + i)
        # 首帧问题只涉及分类器，不需要 IoU 网络
        tracker = Tracker(backbone, None, config.model_copy(update={"multi_scale": True}), seed=seed + i)
        problems.append(tracker.first_frame_problem(seq.frame(0), seq.ground_truth[0]))
    return problems


def _solve(problem: Tuple[SampleMemory, ClassifierWeights], method: str, config: TrackerConfig,
           lr: float, momentum: float) -> List[Tuple[int, float]]:
    memory, weights = problem
    run = train_initial(memory, weights.clone(), method=method, n_gn=config.init_gn, n_cg=config.init_cg,
                        tape=Tape(method), gd_lr=lr, gd_momentum=momentum, gdpp_factor=config.gdpp_factor)
    return run.loss_trace


def _grid_search(problems, config: TrackerConfig, lr_grid: Seq[float],
                 momentum_grid: Seq[float]) -> Tuple[float, float]:
    """在 GD 预算下选择中位末损失最低的 (lr, momentum)，发散的组合被淘汰"""
    best, best_loss = None, float("inf")
    for lr in lr_grid:
        for momentum in momentum_grid:
            try:
                finals = [_solve(p, "gd", config, lr, momentum)[-1][1] for p in problems]
            except ConvergenceError:
                logger.debug(f"GD lr={lr:g}, momentum={momentum:g} diverged")
                continue
            loss = float(np.median(finals))
            logger.debug(f"GD lr={lr:g}, momentum={momentum:g}: median final loss {loss:.6g}")
            if loss < best_loss:
                best, best_loss = (lr, momentum), loss
    if best is None:
        raise ConvergenceError("gradient descent diverged for every grid setting")
    logger.info(f"GD grid search selected lr={best[0]:g}, momentum={best[1]:g}")
    return best


def _align(traces: Seq[List[Tuple[int, float]]]) -> List[Tuple[int, float, float]]:
    """把各问题的轨迹按调用次数对齐（阶梯函数：取不超过该次数的最近记录）"""
    grid = sorted({c for trace in traces for c, _ in trace})
    aligned = []
    for calls in grid:
        values = []
        for trace in traces:
            value = trace[0][1]
            for c, loss in trace:
                if c > calls:
                    break
                value = loss
            values.append(value)
        aligned.append((calls, float(np.mean(values)), float(np.median(values))))
    return aligned


def convergence_bench(
    n_problems: int,
    backbone: Backbone,
    config: TrackerConfig,
    seed: int = 0,
    lr_grid: Seq[float] = GD_LR_GRID,
    momentum_grid: Seq[float] = GD_MOMENTUM_GRID,
) -> ConvergenceReport:
    """首帧分类器训练的收敛性对比

    GN-CG 使用首帧迭代设置，GD 使用相同的 BackProp 预算，GD++ 为其 gdpp_factor 倍；
    GD 的学习率与动量先在同一批问题上网格搜索。所有方法从同一初始权重出发。
    """
    problems = first_frame_problems(n_problems, backbone, config, seed)
    lr, momentum = _grid_search(problems, config, lr_grid, momentum_grid)
    report = ConvergenceReport(gd_lr=lr, gd_momentum=momentum, problems=n_problems)
    for method in CONVERGENCE_METHODS:
        traces = [_solve(p, method, config, lr, momentum) for p in problems]
        report.traces[method] = _align(traces)
        calls, mean, median = report.traces[method][-1]
        logger.info(f"{method}: {calls} backprop calls, final loss mean {mean:.6g}, median {median:.6g}")
    return report


# ---------------------------------------------------------------------------
# 有限差分梯度检查
# ---------------------------------------------------------------------------

class GradcheckResult(BaseModel):
    name: str
    passed: bool
    seconds: float
    message: str = ""


def _gradcheck_cases() -> Dict[str, Tuple[Callable, Tuple[torch.Tensor, ...]]]:
    g = torch.Generator().manual_seed(0)

    def randn(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_()

    def rand(*shape, lo=0.0, hi=1.0):
        value = lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)
        return value.requires_grad_()

    running_mean, running_var = torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64)
    fmap = randn(6, 7, 3)
    net = IoUNet(kind="modulation", in_channels={"block3": 3, "block4": 3}, dz=4, hidden=8,
                 ref_pool=2, test_pool=2, seed=0).double().eval()
    feats = {"block3": torch.randn(1, 8, 8, 3, generator=g, dtype=torch.float64),
             "block4": torch.randn(1, 4, 4, 3, generator=g, dtype=torch.float64)}
    with torch.no_grad():
        ref = net.reference(feats, torch.tensor([[30.3, 29.7, 20.6, 18.2]], dtype=torch.float64)).detached()
        test_feats = net.test_features(feats)
    cls_x = randn(5, 5, 3).detach()
    cls_y = torch.rand(5, 5, generator=g, dtype=torch.float64)

    def classifier_loss(w1, w2):
        scores = classify(cls_x, ClassifierWeights(w1=w1, w2=w2))
        return ((scores - cls_y) ** 2).sum() + 1e-2 * (w1 ** 2).sum() + 1e-2 * (w2 ** 2).sum()

    return {
        "add": (ad.add, (randn(3, 4), randn(3, 4))),
        "sub": (ad.sub, (randn(3, 4), randn(1, 4))),
        "mul": (ad.mul, (randn(3, 4), randn(3, 4))),
        "matmul": (ad.matmul, (randn(3, 4), randn(4, 2))),
        "scale": (lambda a: ad.scale(a, 2.5), (randn(3, 4),)),
        "total": (ad.total, (randn(3, 4),)),
        "reshape": (lambda a: ad.reshape(a, (2, 6)), (randn(3, 4),)),
        "concat": (lambda a, b: ad.concat([a, b], dim=0), (randn(2, 3), randn(4, 3))),
        "conv2d": (lambda x, w: ad.conv2d(x, w, stride=1, padding=1), (randn(5, 5, 2), randn(3, 3, 2, 3))),
        "conv2d-stride2": (lambda x, w: ad.conv2d(x, w, stride=2), (randn(7, 7, 2), randn(3, 3, 2, 2))),
        "conv2d-same-even": (lambda x, w: ad.conv2d(x, w, padding="same"), (randn(5, 5, 2), randn(4, 4, 2, 1))),
        "linear": (ad.linear, (randn(3, 4), randn(4, 2), randn(2))),
        "relu": (ad.relu, (rand(3, 4, lo=0.1, hi=1.0),)),
        "pelu": (lambda t: ad.pelu(t, PELU_ALPHA), (randn(3, 4),)),
        "modulate": (ad.modulate, (randn(3, 3, 4), randn(4))),
        "batchnorm": (lambda x, s, b: ad.batchnorm(x, s, b, running_mean.clone(), running_var.clone(), mode="train"),
                      (randn(6, 4), randn(4), randn(4))),
        "prpool-map": (lambda f: pool_regions(f, torch.tensor([[[2.6, 3.1, 3.3, 2.7]]], dtype=torch.float64), 2),
                       (randn(1, 6, 7, 3),)),
        "prpool-box": (lambda b: pool_regions(fmap.detach().unsqueeze(0), b.reshape(1, 1, 4), 2),
                       (torch.tensor([2.6, 3.1, 3.3, 2.7], dtype=torch.float64, requires_grad=True),)),
        "bilinear": (lambda f: bilinear_at(f, 2.3, 1.6), (randn(4, 5, 2),)),
        "classifier": (classifier_loss, (randn(1, 1, 3, 4), randn(2, 2, 4, 1))),
        "iou-predict-box": (lambda b: net.predict_from(ref, test_feats, b.reshape(1, 1, 4)),
                            (torch.tensor([31.2, 28.4, 22.3, 19.1], dtype=torch.float64, requires_grad=True),)),
    }


def run_gradchecks(eps: float = 1e-6, atol: float = 1e-5, rtol: float = 1e-4) -> List[GradcheckResult]:
    """对全部可微算子、分类器、PrPool（特征与框坐标）和 IoU 预测（框坐标）做 64 位中心差分检查"""
    results = []
    with precision("f64"):
        for name, (fn, inputs) in _gradcheck_cases().items():
            start = time.perf_counter()
            message = ""
            try:
                passed = torch.autograd.gradcheck(fn, inputs, eps=eps, atol=atol, rtol=rtol)
            except Exception as e:
                passed, message = False, str(e).splitlines()[0]
            results.append(GradcheckResult(name=name, passed=passed, seconds=time.perf_counter() - start,
                                           message=message))
            logger.info(f"gradcheck {name}: {'ok' if passed else 'FAILED'}")
    return results


# ---------------------------------------------------------------------------
# IoU 网络结构对比
# ---------------------------------------------------------------------------

class ArchitectureRow(BaseModel):
    kind: str
    parameters: int
    val_mse: float
    baseline_mse: float


def iou_architecture_study(
    sequences: Seq[Sequence],
    backbone: Backbone,
    config: IoUTrainingConfig,
    kinds: Seq[str] = IOU_KINDS,
    dz: int = 64,
    hidden: int = 256,
    ref_pool: int = 3,
    test_pool: int = 5,
) -> List[ArchitectureRow]:
    """在相同的训练数据与验证集上训练各 IoU 网络变体，比较验证 MSE 与参数量"""
    sampler = SyntheticPairSampler(sequences, config)
    val = build_validation_set(sampler, config)
    rows = []
    for kind in kinds:
        net = IoUNet(kind=kind, in_channels=backbone.channels, dz=dz, hidden=hidden,
                     ref_pool=ref_pool, test_pool=test_pool, seed=config.seed)
        history = train_offline(net, backbone, sampler, config, val)
        rows.append(ArchitectureRow(kind=kind, parameters=net.parameter_count(),
                                    val_mse=history.final_val_mse, baseline_mse=history.baseline_mse))
    return rows


def architecture_csv(rows: Seq[ArchitectureRow]) -> str:
    lines = ["kind,parameters,val_mse,baseline_mse"]
    lines += [f"{r.kind},{r.parameters},{r.val_mse:.6f},{r.baseline_mse:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
