from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
import os
from dotenv import load_dotenv

load_dotenv()

class Settings(BaseSettings):
    """应用程序配置类，管理所有配置项

    所有键均可写入 key=value 格式的配置文件（支持 # 注释），
    通过命令行 --config 参数加载，键名大小写不敏感。
    """

    # 项目与运行环境
    PROJECT_NAME: str = "overlap-track"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")     # 日志级别
    LOG_FILE: Optional[str] = "logs/app.log"             # 日志文件，留空则不写文件
    SEED: int = 0                                        # 全局随机种子
    PRECISION: str = "f32"                               # 数值精度 f32 / f64
    TORCH_THREADS: int = 1                               # 固定线程数以保证结果逐字节可复现

    # 特征提取
    PATCH_SIZE: int = 288            # 图像块边长（像素）
    AREA_FACTOR: float = 5.0         # 图像块面积 = AREA_FACTOR^2 × 目标面积
    BACKBONE_SEED: int = 0           # 随机骨干网络的种子
    BACKBONE_WIDTHS: str = "32,64,128,256"  # 四个阶段的通道数

    # 在线分类器
    CLS_OUT_DIM: int = 64            # 第一层 1x1 卷积的输出维度
    CLS_KERNEL: int = 4              # 第二层卷积核大小
    CLS_LAMBDA1: float = 1e-2
    CLS_LAMBDA2: float = 1e-2
    LABEL_SIGMA_FACTOR: float = 1.0 / 12.0   # 高斯标签 sigma = 得分图边长 × 该系数
    MEMORY_CAPACITY: int = 50
    MEMORY_LR: float = 0.01
    INIT_SAMPLES: int = 30
    INIT_GN: int = 6
    INIT_CG: int = 10
    UPDATE_GN: int = 1
    UPDATE_CG: int = 5
    UPDATE_INTERVAL: int = 10
    OPTIMIZER: str = "gncg"          # gncg / gd / gd++
    GD_LR: float = 0.5               # 由 convergence-bench 网格搜索得到
    GD_MOMENTUM: float = 0.9
    GDPP_FACTOR: int = 5

    # 目标估计
    IOU_DZ: int = 64                 # 每个特征块的调制维度
    IOU_HIDDEN: int = 256            # 预测器 g 的隐藏层宽度
    IOU_REF_POOL: int = 3            # 参考分支 PrPool 输出尺寸
    IOU_TEST_POOL: int = 5           # 测试分支 PrPool 输出尺寸
    IOU_KIND: str = "modulation"
    PROPOSALS: int = 10
    ASCENT_STEPS: int = 5
    ASCENT_STEP_LEN: float = 1.0
    ASCENT_PARAMETRIZATION: str = "scaled"
    TOP_K: int = 3
    PROPOSAL_CENTER_NOISE: float = 0.1
    PROPOSAL_SIZE_NOISE: float = 0.1

    # 跟踪流程
    LOST_THRESHOLD: float = 0.25
    HN_BOOST: float = 2.0
    HN_RATIO: float = 0.5
    HN_RADIUS: float = 0.2
    NO_CLASSIF_AREA_FACTOR: float = 6.0
    MULTI_SCALE_RATIO: float = 1.02
    MULTI_SCALE_COUNT: int = 5
    USE_CLASSIFIER: bool = True
    USE_HARD_NEGATIVE: bool = True
    MULTI_SCALE: bool = False

    # IoU 网络离线训练
    IOU_EPOCHS: int = 40
    IOU_BATCH: int = 64
    IOU_BATCHES_PER_EPOCH: int = 8
    IOU_LR: float = 1e-3
    IOU_LR_DECAY: float = 0.2
    IOU_LR_STEP: int = 15
    IOU_CANDIDATES: int = 16
    IOU_MIN_IOU: float = 0.1
    IOU_MAX_GAP: int = 50
    IOU_COLOR_JITTER: float = 0.1
    IOU_CENTER_JITTER: float = 0.25   # 测试块中心扰动（相对目标尺寸）
    IOU_SCALE_JITTER: float = 0.25    # 测试块尺度扰动（对数尺度）
    IOU_VAL_PAIRS: int = 128
    IOU_TRAIN_SEQUENCES: int = 24

    # 基准测试
    SUITE_PER_KIND: int = 4           # 每类合成序列的数量（6 类）
    SUITE_FRAMES: int = 100
    FRAME_HEIGHT: int = 240
    FRAME_WIDTH: int = 320
    ABLATION_RUNS: int = 5
    PRECISION_THRESHOLD: float = 20.0
    NORM_PRECISION_THRESHOLD: float = 0.2
    CONVERGENCE_PROBLEMS: int = 10

    model_config = SettingsConfigDict(
        case_sensitive=False,   # 配置键名大小写不敏感
        extra="ignore",
    )

    def backbone_widths(self) -> tuple:
        """解析骨干网络各阶段通道数"""
        return tuple(int(v) for v in self.BACKBONE_WIDTHS.split(","))

def load_settings(config_path: Optional[str] = None) -> Settings:
    """从 key=value 配置文件加载配置，未指定时使用环境变量与默认值"""
    if config_path is None:
        return Settings()
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")
    return Settings(_env_file=config_path)

# 创建全局配置实例
settings = Settings()
