import json
import math
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from loguru import logger

from config.config import Settings
from models.errors import DatasetError, ModelFormatError, TrackingError
from models.sequence import Sequence
from models.tracking import IoUTrainingConfig, TrackerConfig
from services.backbone import Backbone
from services.classifier import ClassifierWeights
from services.benchmark import (
    VARIANTS,
    ablation_csv,
    ablation_table,
    architecture_csv,
    convergence_bench,
    evaluate_suite,
    iou_architecture_study,
    run_ablation,
    run_gradchecks,
    track_and_evaluate,
)
from services.dataset import load_sequence, save_sequence
from services.iou_net import IOU_KINDS, IoUNet
from services.iou_training import SyntheticPairSampler, train_offline
from services.metrics import curve_rows, merge_reports
from services.model_io import load_model, save_model
from services.synth import SUITE_CATEGORIES, standard_suite
from services.tracker import Tracker

MODEL_FILENAME = "iou_model.bin"


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info(f"Wrote {path}")


def _backbone(settings: Settings) -> Backbone:
    return Backbone(settings.backbone_widths(), seed=settings.BACKBONE_SEED)


def _iou_net(settings: Settings, backbone: Backbone, kind: Optional[str] = None) -> IoUNet:
    return IoUNet(kind=kind or settings.IOU_KIND, in_channels=backbone.channels, dz=settings.IOU_DZ,
                  hidden=settings.IOU_HIDDEN, ref_pool=settings.IOU_REF_POOL,
                  test_pool=settings.IOU_TEST_POOL, seed=settings.SEED)


def _load_model(path: Optional[str], backbone: Backbone,
                required: bool) -> Tuple[Optional[IoUNet], Optional[ClassifierWeights]]:
    """加载 IoU 网络及（若有）保存的分类器权重"""
    if path is None:
        if required:
            raise ModelFormatError("an IoU model file is required (--model), see the train-iou command")
        return None, None
    net, cls = load_model(path)
    if net.in_channels != backbone.channels:
        raise ModelFormatError(f"{path}: model expects feature channels {net.in_channels}, "
                               f"backbone produces {backbone.channels}")
    if cls is not None:
        logger.info(f"{path}: stored classifier weights found")
    return net, cls


def _save_tracked_model(path: str, tracker: Tracker) -> None:
    """把 IoU 网络与序列结束时的分类器权重写入同一个模型文件"""
    if tracker.iou_net is None:
        raise ModelFormatError("--save-model needs an IoU network, the multi-scale variant has none")
    state = tracker.last_state
    cls = state.cls if state is not None else None
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_model(path, tracker.iou_net, cls)


def _suite(settings: Settings, per_category: Optional[int] = None, n_frames: Optional[int] = None,
           categories: Tuple[str, ...] = SUITE_CATEGORIES) -> List[Sequence]:
    return standard_suite(
        per_category=per_category or settings.SUITE_PER_KIND,
        n_frames=n_frames or settings.SUITE_FRAMES,
        frame_height=settings.FRAME_HEIGHT,
        frame_width=settings.FRAME_WIDTH,
        seed=settings.SEED,
        categories=categories,
    )


def _load_suite(directory: str) -> List[Sequence]:
    """目录下每个子目录是一个序列"""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"Suite directory not found: {root}")
    sequences = [load_sequence(d) for d in sorted(p for p in root.iterdir() if p.is_dir())]
    if not sequences:
        raise DatasetError(f"No sequence directories in {root}")
    return sequences


def _sequences(args, settings: Settings) -> List[Sequence]:
    if getattr(args, "data", None):
        return _load_suite(args.data)
    return _suite(settings, getattr(args, "per_category", None), getattr(args, "frames", None))


def _tracker_config(args, settings: Settings) -> TrackerConfig:
    overrides = dict(VARIANTS[args.variant]) if getattr(args, "variant", None) else {}
    return TrackerConfig.from_settings(settings, **overrides)


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_synth(args, settings: Settings) -> int:
    """生成合成序列目录"""
    out = _out_dir(args)
    for seq in _suite(settings, args.per_category, args.frames):
        save_sequence(seq, out / seq.name)
    return 0


def cmd_train_iou(args, settings: Settings) -> int:
    """在合成（或给定）序列上离线训练 IoU 网络，写出模型文件与逐 epoch 记录"""
    out = _out_dir(args)
    backbone = _backbone(settings)
    if args.data:
        sequences = _load_suite(args.data)
    else:
        per_category = math.ceil(settings.IOU_TRAIN_SEQUENCES / len(SUITE_CATEGORIES))
        sequences = _suite(settings, per_category)
    config = IoUTrainingConfig.from_settings(settings)
    if args.epochs:
        config = config.model_copy(update={"epochs": args.epochs})
    net = _iou_net(settings, backbone, args.kind)
    history = train_offline(net, backbone, SyntheticPairSampler(sequences, config), config)
    save_model(out / MODEL_FILENAME, net)
    _write(out / "training.csv", "\n".join(history.csv_lines()) + "\n")
    logger.info(f"Final validation MSE {history.final_val_mse:.4f} "
                f"(constant-mean baseline {history.baseline_mse:.4f})")
    return 0


def cmd_track(args, settings: Settings) -> int:
    """跟踪单个序列，写出轨迹 CSV"""
    out = _out_dir(args)
    config = _tracker_config(args, settings)
    backbone = _backbone(settings)
    iou_net, cls = _load_model(args.model, backbone, required=not config.multi_scale)
    sequence = load_sequence(args.sequence)
    tracker = Tracker(backbone, iou_net, config, seed=settings.SEED, classifier=cls)
    report, outputs = track_and_evaluate(tracker, sequence, settings.PRECISION_THRESHOLD,
                                         settings.NORM_PRECISION_THRESHOLD)
    lines = ["frame,x,y,w,h,confidence,lost"] + [o.csv_row() for o in outputs]
    _write(out / f"{sequence.name}.csv", "\n".join(lines) + "\n")
    if args.save_model:
        _save_tracked_model(args.save_model, tracker)
    logger.info(f"{sequence.name}: AUC {report.auc:.2f}, OP50 {report.op50:.2f}, precision {report.precision:.2f}")
    return 0


def cmd_eval(args, settings: Settings) -> int:
    """评测整个序列集，写出汇总 CSV/JSON 与成功率曲线 CSV"""
    out = _out_dir(args)
    config = _tracker_config(args, settings)
    backbone = _backbone(settings)
    iou_net, cls = _load_model(args.model, backbone, required=not config.multi_scale)
    tracker = Tracker(backbone, iou_net, config, seed=settings.SEED, classifier=cls)
    reports = evaluate_suite(tracker, _sequences(args, settings),
                             settings.PRECISION_THRESHOLD, settings.NORM_PRECISION_THRESHOLD)
    overall = merge_reports("overall", reports)

    # CSV 不含计时，保证固定种子下逐字节可复现
    lines = ["sequence,frames,auc,op50,op75,precision,norm_precision"]
    for r in reports + [overall]:
        lines.append(f"{r.name},{len(r.ious)},{r.auc:.4f},{r.op50:.4f},{r.op75:.4f},"
                     f"{r.precision:.4f},{r.norm_precision:.4f}")
    _write(out / "eval.csv", "\n".join(lines) + "\n")

    curves = ["sequence,threshold,op"]
    for r in reports + [overall]:
        curves += [f"{r.name},{t:.2f},{op:.4f}" for t, op in curve_rows(r)]
    _write(out / "success_curves.csv", "\n".join(curves) + "\n")

    summary = {r.name: r.model_dump(exclude={"ious", "thresholds", "op"}) | {"fps": r.fps}
               for r in reports + [overall]}
    _write(out / "eval.json", json.dumps(summary, indent=2, ensure_ascii=False) + "\n")
    logger.info(f"Overall ({config.variant_name}): AUC {overall.auc:.2f}, OP50 {overall.op50:.2f}, "
                f"OP75 {overall.op75:.2f}, precision {overall.precision:.2f}, "
                f"norm. precision {overall.norm_precision:.2f}")
    return 0


def cmd_ablate(args, settings: Settings) -> int:
    """跟踪器变体消融表"""
    out = _out_dir(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    backbone = _backbone(settings)
    needs_net = any(not VARIANTS.get(v, {}).get("multi_scale", False) for v in variants)
    # 消融中每个序列的分类器都从头训练，忽略保存的分类器权重
    iou_net, _ = _load_model(args.model, backbone, required=needs_net)
    rows = run_ablation(_sequences(args, settings), variants, backbone, iou_net,
                        TrackerConfig.from_settings(settings), runs=args.runs or settings.ABLATION_RUNS,
                        seed=settings.SEED, precision_threshold=settings.PRECISION_THRESHOLD,
                        norm_threshold=settings.NORM_PRECISION_THRESHOLD)
    table = ablation_table(rows)
    _write(out / "ablation.csv", ablation_csv(rows))
    _write(out / "ablation.txt", table)
    sys.stdout.write(table)
    return 0


def cmd_iou_ablate(args, settings: Settings) -> int:
    """IoU 网络结构对比：各变体的验证 MSE 与参数量"""
    out = _out_dir(args)
    kinds = args.kinds.split(",") if args.kinds else list(IOU_KINDS)
    backbone = _backbone(settings)
    per_category = math.ceil(settings.IOU_TRAIN_SEQUENCES / len(SUITE_CATEGORIES))
    sequences = _load_suite(args.data) if args.data else _suite(settings, per_category)
    config = IoUTrainingConfig.from_settings(settings)
    if args.epochs:
        config = config.model_copy(update={"epochs": args.epochs})
    rows = iou_architecture_study(sequences, backbone, config, kinds, dz=settings.IOU_DZ,
                                  hidden=settings.IOU_HIDDEN, ref_pool=settings.IOU_REF_POOL,
                                  test_pool=settings.IOU_TEST_POOL)
    text = architecture_csv(rows)
    _write(out / "iou_ablation.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_convergence_bench(args, settings: Settings) -> int:
    """GN-CG / GD / GD++ 损失随 BackProp 调用次数的变化"""
    out = _out_dir(args)
    report = convergence_bench(args.problems or settings.CONVERGENCE_PROBLEMS, _backbone(settings),
                               TrackerConfig.from_settings(settings), seed=settings.SEED)
    _write(out / "convergence.csv", "\n".join(report.csv_lines()) + "\n")
    _write(out / "convergence_gd.json",
           json.dumps({"gd_lr": report.gd_lr, "gd_momentum": report.gd_momentum,
                       "problems": report.problems}, indent=2) + "\n")
    for method in report.traces:
        logger.info(f"{method}: median final loss {report.final_median(method):.6g}")
    return 0


def cmd_gradcheck(args, settings: Settings) -> int:
    """运行全部有限差分梯度检查，有失败项时返回 1"""
    results = run_gradchecks()
    failed = [r for r in results if not r.passed]
    for r in failed:
        logger.error(f"gradcheck {r.name} failed: {r.message}")
    logger.info(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed "
                f"in {sum(r.seconds for r in results):.1f}s")
    return 1 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "train-iou": cmd_train_iou,
    "track": cmd_track,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "iou-ablate": cmd_iou_ablate,
    "convergence-bench": cmd_convergence_bench,
    "gradcheck": cmd_gradcheck,
}


def dispatch(args, settings: Settings) -> int:
    """执行子命令；领域错误记录日志并返回退出码 1"""
    try:
        return COMMANDS[args.command](args, settings)
    except TrackingError as e:
        logger.error(f"Error in {args.command}: {str(e)}")
        return 1
