from pathlib import Path

import pytest
from pydantic import ValidationError

from config.config import Settings, load_settings
from models.tracking import IoUTrainingConfig, TrackerConfig

DEFAULT_ENV = Path(__file__).resolve().parent.parent / "config" / "default.env"


def test_default_env_matches_defaults():
    """测试 config/default.env 与代码中的默认值一致"""
    loaded = load_settings(str(DEFAULT_ENV))
    defaults = Settings()
    for key in ("PATCH_SIZE", "INIT_GN", "INIT_CG", "UPDATE_GN", "UPDATE_CG", "PROPOSALS", "TOP_K",
                "IOU_KIND", "OPTIMIZER", "BACKBONE_WIDTHS", "ABLATION_RUNS"):
        assert getattr(loaded, key) == getattr(defaults, key)
    assert loaded.LABEL_SIGMA_FACTOR == pytest.approx(defaults.LABEL_SIGMA_FACTOR)
    assert loaded.backbone_widths() == (32, 64, 128, 256)


def test_config_file_overrides(tmp_path):
    """测试 key=value 配置文件覆盖默认值，键名大小写不敏感，注释被忽略"""
    path = tmp_path / "run.env"
    path.write_text("# 小规模运行\npatch_size=96\nINIT_SAMPLES=4\nUSE_HARD_NEGATIVE=false\n", encoding="utf-8")
    settings = load_settings(str(path))
    assert settings.PATCH_SIZE == 96
    config = TrackerConfig.from_settings(settings, top_k=2)
    assert config.patch_size == 96 and config.init_samples == 4 and config.top_k == 2
    assert config.variant_name == "no-hn"
    with pytest.raises(FileNotFoundError):
        load_settings(str(tmp_path / "absent.env"))


def test_tracker_config_validation():
    """测试 top_k 不得超过候选框数量，非法取值报错"""
    with pytest.raises(ValidationError):
        TrackerConfig(proposals=2, top_k=3)
    with pytest.raises(ValidationError):
        TrackerConfig(patch_size=0)
    with pytest.raises(ValidationError):
        TrackerConfig(optimizer="lbfgs")


def test_variant_names():
    """测试消融开关对应的变体名称"""
    assert TrackerConfig().variant_name == "full"
    assert TrackerConfig(multi_scale=True).variant_name == "multi-scale"
    assert TrackerConfig(use_classifier=False).variant_name == "no-classifier"
    assert TrackerConfig(optimizer="gd++").variant_name == "gd++"


def test_learning_rate_schedule():
    """测试阶梯学习率：1e-3，15 个 epoch 后 2e-4，30 个 epoch 后 4e-5"""
    config = IoUTrainingConfig()
    assert config.lr_at(0) == pytest.approx(1e-3)
    assert config.lr_at(14) == pytest.approx(1e-3)
    assert config.lr_at(15) == pytest.approx(2e-4)
    assert config.lr_at(30) == pytest.approx(4e-5)
