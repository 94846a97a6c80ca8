import pytest

from models.tracking import IoUTrainingConfig, TrackerConfig
from services.backbone import Backbone
from services.benchmark import (
    VARIANTS,
    AblationRow,
    ablation_csv,
    ablation_table,
    architecture_csv,
    ArchitectureRow,
    convergence_bench,
    evaluate_suite,
    iou_architecture_study,
    run_ablation,
    run_gradchecks,
)
from services.iou_net import IoUNet
from services.iou_training import SyntheticPairSampler, train_offline
from services.synth import category_spec, standard_suite, synth_sequence
from services.tracker import Tracker


@pytest.fixture
def tiny_suite():
    return [synth_sequence(category_spec(c, 0, n_frames=3, frame_height=96, frame_width=128), seed=i)
            for i, c in enumerate(("static", "translation"))]


@pytest.fixture
def quick_config(tiny_config):
    """迭代次数减小的跟踪配置"""
    return tiny_config.model_copy(update={"init_gn": 2, "init_cg": 3})


def test_evaluate_suite_sorted_by_name(tiny_backbone, tiny_iou_net, quick_config, tiny_suite):
    """测试评测报告按序列名排序"""
    reports = evaluate_suite(Tracker(tiny_backbone, tiny_iou_net, quick_config), list(reversed(tiny_suite)))
    assert [r.name for r in reports] == sorted(s.name for s in tiny_suite)


def test_run_ablation(tiny_backbone, tiny_iou_net, quick_config, tiny_suite):
    """测试消融：每个变体在 all 及各类别子集上各一行，full 没有配对方差"""
    rows = run_ablation(tiny_suite, ["full", "no-hn"], tiny_backbone, tiny_iou_net, quick_config, runs=2)
    assert [(r.variant, r.subset) for r in rows] == [
        ("full", "all"), ("full", "static"), ("full", "translation"),
        ("no-hn", "all"), ("no-hn", "static"), ("no-hn", "translation"),
    ]
    for row in rows:
        assert row.runs == 2
        assert 0.0 <= row.auc <= 100.0
        assert (row.diff_var is None) == (row.variant == "full")
        if row.diff_var is not None:
            assert row.diff_var >= 0.0
    with pytest.raises(ValueError):
        run_ablation(tiny_suite, ["full", "oracle"], tiny_backbone, tiny_iou_net, quick_config)


def test_ablation_formatting():
    """测试消融结果的 CSV 与对齐文本表格"""
    rows = [AblationRow(variant="full", subset="all", runs=5, op50=71.234, op75=40.0, auc=55.5),
            AblationRow(variant="multi-scale", subset="all", runs=5, op50=60.0, op75=30.0, auc=48.25,
                        auc_std=1.5, diff_var=2.0)]
    csv = ablation_csv(rows).splitlines()
    assert csv[0] == "variant,subset,runs,op50,op75,auc,auc_std,diff_var"
    assert csv[1] == "full,all,5,71.23,40.00,55.50,0.00,"
    assert csv[2].endswith(",2.0000")
    table = ablation_table(rows).splitlines()
    assert len(table) == 4
    assert set(table[1].replace(" ", "")) == {"-"}
    assert len({len(line) for line in table}) == 1
    assert set(VARIANTS) == {"full", "multi-scale", "no-classifier", "gd", "gd++", "no-hn"}


def test_convergence_bench(tiny_backbone, quick_config):
    """测试收敛性对比：各方法从同一损失出发，GN-CG 与 GD 预算相同，GD++ 为 5 倍"""
    report = convergence_bench(2, tiny_backbone, quick_config, lr_grid=(1e-3, 1e-2), momentum_grid=(0.0,))
    assert report.problems == 2
    assert report.gd_lr in (1e-3, 1e-2) and report.gd_momentum == 0.0
    starts = [report.traces[m][0] for m in ("gncg", "gd", "gd++")]
    assert starts[0][0] == 0
    assert starts[1][2] == pytest.approx(starts[0][2]) and starts[2][2] == pytest.approx(starts[0][2])
    budget = 2 * (1 + 2 * 3)
    assert report.traces["gncg"][-1][0] == budget == report.traces["gd"][-1][0]
    assert report.traces["gd++"][-1][0] == 5 * budget
    assert report.final_median("gncg") <= report.loss_at("gncg", 0)
    assert report.csv_lines()[0] == "method,backprop_calls,loss,median_loss"


def test_gradchecks_pass():
    """测试全部有限差分梯度检查通过"""
    results = run_gradchecks()
    failed = [(r.name, r.message) for r in results if not r.passed]
    assert not failed
    assert {"conv2d", "prpool-box", "classifier", "iou-predict-box"} <= {r.name for r in results}


def test_architecture_csv():
    rows = [ArchitectureRow(kind="modulation", parameters=1200, val_mse=0.0123456, baseline_mse=0.05)]
    assert architecture_csv(rows) == "kind,parameters,val_mse,baseline_mse\nmodulation,1200,0.012346,0.050000\n"


@pytest.fixture(scope="module")
def trained_setup():
    """在合成序列上训练的 IoU 网络与所用的骨干网络、训练配置"""
    backbone = Backbone(widths=(8, 16, 32, 32), seed=0)
    train_suite = standard_suite(per_category=2, n_frames=20, frame_height=128, frame_width=160, seed=0)
    config = IoUTrainingConfig(epochs=30, batch=32, batches_per_epoch=10, decay_step=15,
                               patch_size=96, val_pairs=64, seed=0)
    net = IoUNet(kind="modulation", in_channels=backbone.channels, dz=16, hidden=64,
                 ref_pool=3, test_pool=5, seed=0)
    train_offline(net, backbone, SyntheticPairSampler(train_suite, config), config)
    return backbone, net, train_suite, config


@pytest.mark.slow
def test_gauss_newton_converges_faster_than_gradient_descent(tiny_backbone, tiny_config):
    """测试 10 个首帧问题上 126 次调用时 GN-CG 的中位损失低于同预算 GD，也低于 5 倍预算的 GD++"""
    report = convergence_bench(10, tiny_backbone, tiny_config, seed=0)
    budget = tiny_config.init_gn * (1 + 2 * tiny_config.init_cg)
    assert budget == 126
    gncg = report.loss_at("gncg", budget)
    assert gncg < report.loss_at("gd", budget)
    assert gncg < report.loss_at("gd++", 5 * budget)


@pytest.mark.slow
def test_ablation_directions(trained_setup):
    """测试消融方向：宽高比变化序列上 full 优于多尺度，干扰物序列上 full 优于不用分类器"""
    backbone, net, _, _ = trained_setup
    suite = standard_suite(per_category=3, n_frames=30, frame_height=128, frame_width=160, seed=1,
                           categories=("aspect-change", "distractors"))
    config = TrackerConfig(patch_size=96, cls_out_dim=16, cls_kernel=2, init_samples=12)
    rows = run_ablation(suite, ["full", "multi-scale", "no-classifier"], backbone, net, config, runs=2)
    auc = {(r.variant, r.subset): r.auc for r in rows}
    assert auc[("full", "aspect-change")] > auc[("multi-scale", "aspect-change")]
    assert auc[("full", "distractors")] > auc[("no-classifier", "distractors")]


@pytest.mark.slow
def test_reference_branch_lowers_validation_error(trained_setup):
    """测试去掉参考分支的 baseline 网络验证 MSE 高于调制网络"""
    backbone, _, train_suite, config = trained_setup
    rows = {r.kind: r for r in iou_architecture_study(train_suite, backbone, config, ("modulation", "baseline"),
                                                      dz=16, hidden=64, ref_pool=3, test_pool=5)}
    assert rows["baseline"].baseline_mse == rows["modulation"].baseline_mse
    assert rows["baseline"].val_mse > rows["modulation"].val_mse
