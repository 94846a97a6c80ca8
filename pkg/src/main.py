import argparse
import os
import sys
from typing import List, Optional

import torch
from loguru import logger

from cli.commands import dispatch
from config.config import Settings, load_settings
from services.autodiff import PRECISIONS, set_precision
from services.benchmark import VARIANTS
from services.iou_net import IOU_KINDS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="随机种子（覆盖配置文件）")
    common.add_argument("--config", default=None, help="key=value 配置文件路径")
    common.add_argument("--precision", choices=sorted(PRECISIONS), default=None, help="数值精度")
    common.add_argument("--out", default="out", help="输出目录")

    parser = argparse.ArgumentParser(prog="overlap-track", description="基于 IoU 最大化的目标跟踪实验工具")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="生成合成序列目录")
    p.add_argument("--per-category", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("train-iou", parents=[common], help="离线训练 IoU 网络")
    p.add_argument("--data", default=None, help="序列集目录（默认使用合成序列）")
    p.add_argument("--kind", choices=IOU_KINDS, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("track", parents=[common], help="跟踪单个序列并输出轨迹 CSV")
    p.add_argument("--sequence", required=True, help="序列目录")
    p.add_argument("--model", default=None, help="IoU 模型文件")
    p.add_argument("--variant", choices=list(VARIANTS), default=None)
    p.add_argument("--save-model", default=None, help="写出 IoU 网络与跟踪后的分类器权重")

    p = sub.add_parser("eval", parents=[common], help="评测序列集")
    p.add_argument("--data", default=None, help="序列集目录（默认使用合成序列）")
    p.add_argument("--model", default=None)
    p.add_argument("--variant", choices=list(VARIANTS), default=None)
    p.add_argument("--per-category", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("ablate", parents=[common], help="跟踪器变体消融")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--variants", default=None, help="逗号分隔的变体名")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--per-category", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("iou-ablate", parents=[common], help="IoU 网络结构对比")
    p.add_argument("--data", default=None)
    p.add_argument("--kinds", default=None, help="逗号分隔的网络变体名")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("convergence-bench", parents=[common], help="在线优化器收敛性对比")
    p.add_argument("--problems", type=int, default=None)

    sub.add_parser("gradcheck", parents=[common], help="有限差分梯度检查")
    return parser


def setup_logging(settings: Settings) -> None:
    """日志输出到 stderr，并按配置写入滚动日志文件"""
    logger.remove()
    logger.add(sys.stderr, level=settings.LOG_LEVEL)
    if settings.LOG_FILE:
        os.makedirs(os.path.dirname(settings.LOG_FILE) or ".", exist_ok=True)
        logger.add(settings.LOG_FILE, level=settings.LOG_LEVEL, rotation="10 MB", encoding="utf-8")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config)
    except FileNotFoundError as e:
        logger.error(str(e))
        return 1
    overrides = {}
    if args.seed is not None:
        overrides["SEED"] = args.seed
    if args.precision is not None:
        overrides["PRECISION"] = args.precision
    settings = settings.model_copy(update=overrides)

    setup_logging(settings)
    torch.set_num_threads(settings.TORCH_THREADS)
    set_precision(settings.PRECISION)
    logger.info(f"{settings.PROJECT_NAME} {args.command}: seed {settings.SEED}, precision {settings.PRECISION}")
    return dispatch(args, settings)


if __name__ == "__main__":
    sys.exit(main())
