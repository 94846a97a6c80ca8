import pytest

from models.errors import DatasetError
from services.dataset import load_sequence, parse_ground_truth, save_sequence


def test_parse_ground_truth(tmp_path):
    """测试 "10,20,30,40" 解析为中心 (25, 40)、宽高 30×40，支持制表符与空格分隔"""
    path = tmp_path / "groundtruth.txt"
    path.write_text("10,20,30,40\n\n1\t2\t3\t4\n5 6 7 8\n", encoding="utf-8")
    boxes = parse_ground_truth(path)
    assert len(boxes) == 3
    assert (boxes[0].cx, boxes[0].cy, boxes[0].w, boxes[0].h) == (25.0, 40.0, 30.0, 40.0)
    assert boxes[2].to_xywh() == pytest.approx((5, 6, 7, 8))


@pytest.mark.parametrize("line", ["1,2,3", "a,b,c,d", "0,0,0,5"])
def test_malformed_ground_truth(tmp_path, line):
    """测试字段数错误、非数字与非正尺寸的行报错并指出行号"""
    path = tmp_path / "groundtruth.txt"
    path.write_text(f"1,2,3,4\n{line}\n", encoding="utf-8")
    with pytest.raises(DatasetError) as exc:
        parse_ground_truth(path)
    assert ":2:" in str(exc.value)


def test_save_and_load_sequence(tmp_path, static_sequence):
    """测试保存后重新加载：帧数、像素与真值框一致"""
    root = save_sequence(static_sequence, tmp_path / "static")
    loaded = load_sequence(root)
    assert loaded.name == "static"
    assert len(loaded) == len(static_sequence)
    assert (loaded.frame(2) == static_sequence.frame(2)).all()
    for a, b in zip(loaded.ground_truth, static_sequence.ground_truth):
        assert a.to_xywh() == pytest.approx(b.to_xywh(), abs=1e-3)


def test_missing_ground_truth_names_path(tmp_path):
    """测试缺少标注文件时错误信息包含期望的路径"""
    (tmp_path / "seq").mkdir()
    with pytest.raises(DatasetError) as exc:
        load_sequence(tmp_path / "seq")
    assert "groundtruth.txt" in str(exc.value)
    with pytest.raises(DatasetError):
        load_sequence(tmp_path / "absent")


def test_frame_count_mismatch(tmp_path, static_sequence):
    """测试帧数与标注行数不一致时报错"""
    root = save_sequence(static_sequence, tmp_path / "seq")
    next(iter(sorted((root / "img").iterdir()))).unlink()
    with pytest.raises(DatasetError):
        load_sequence(root)
