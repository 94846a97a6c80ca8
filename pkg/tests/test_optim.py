import pytest
import torch

from models.errors import ConvergenceError, ShapeError
from models.tracking import OptimizerRun
from services.autodiff import Tape, precision
from services.classifier import ClassifierWeights, SampleMemory, residual_vector, train_initial
from services.optim import (
    AdamState,
    ResidualProblem,
    adam,
    gauss_newton_cg,
    gradient_descent,
    jtj_apply,
    minimize,
)


def linear_problem(a: torch.Tensor, b: torch.Tensor, w0: torch.Tensor) -> ResidualProblem:
    return ResidualProblem(lambda ws: a @ ws["w"] - b, {"w": w0.clone()})


def test_gauss_newton_solves_linear_least_squares(f64):
    """测试线性残差 Aw − b 一次 GN（N_CG = 2）得到 w = [1, 1]"""
    a = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=f64)
    b = torch.tensor([2.0, 1.0], dtype=f64)
    problem = linear_problem(a, b, torch.zeros(2, dtype=f64))
    run = gauss_newton_cg(problem, OptimizerRun(n_gn=1, n_cg=2))
    assert torch.allclose(problem.weights["w"], torch.tensor([1.0, 1.0], dtype=f64), atol=1e-6)
    assert run.final_loss == pytest.approx(0.0, abs=1e-12)


def test_cg_matches_normal_equations(f64):
    """测试 N_CG 等于维数时与正规方程的解一致"""
    g = torch.Generator().manual_seed(3)
    dim = 12
    a = torch.randn(30, dim, generator=g, dtype=f64) + 3.0 * torch.eye(30, dim, dtype=f64)
    b = torch.randn(30, generator=g, dtype=f64)
    problem = linear_problem(a, b, torch.zeros(dim, dtype=f64))
    gauss_newton_cg(problem, OptimizerRun(n_gn=1, n_cg=dim))
    expected = torch.linalg.solve(a.T @ a, a.T @ b)
    rel = (problem.weights["w"] - expected).norm() / expected.norm()
    assert float(rel) < 1e-6


def test_zero_residual_leaves_weights_unchanged(f64):
    """测试初始点残差为零时权重不变"""
    a = torch.eye(3, dtype=f64)
    w0 = torch.tensor([1.0, -2.0, 0.5], dtype=f64)
    problem = linear_problem(a, a @ w0, w0)
    gauss_newton_cg(problem, OptimizerRun(n_gn=2, n_cg=3))
    assert torch.equal(problem.weights["w"], w0)


def test_call_count_structure(f64):
    """测试 BackProp 调用次数为 N_GN·(1 + 2·N_CG)"""
    g = torch.Generator().manual_seed(0)
    a = torch.randn(20, 8, generator=g, dtype=f64)
    b = torch.randn(20, generator=g, dtype=f64)
    problem = ResidualProblem(lambda ws: torch.tanh(a @ ws["w"]) - b, {"w": torch.zeros(8, dtype=f64)})
    tape = Tape()
    run = gauss_newton_cg(problem, OptimizerRun(n_gn=3, n_cg=2), tape)
    assert tape.backprop_calls == 3 * (1 + 2 * 2) == run.expected_calls == run.backprop_calls
    # 每次 GN 迭代前记录一次，最后追加最终损失
    assert [c for c, _ in run.loss_trace] == [0, 5, 10, 15]


def test_invalid_iteration_counts():
    """测试 N_GN 或 N_CG 小于 1 时报错"""
    problem = ResidualProblem(lambda ws: ws["w"], {"w": torch.ones(2)})
    with pytest.raises(ValueError):
        gauss_newton_cg(problem, OptimizerRun.model_construct(n_gn=0, n_cg=1, loss_trace=[]))


def test_jtj_apply_matches_explicit_matrices(f64):
    """测试 JᵀJp：恒等残差得 p，线性残差得 AᵀAp"""
    p = torch.randn(4, dtype=f64)
    identity = ResidualProblem(lambda ws: ws["w"], {"w": torch.randn(4, dtype=f64)})
    tape = Tape()
    assert torch.allclose(jtj_apply(identity, p, tape), p)
    assert tape.backprop_calls == 3

    a = torch.randn(6, 4, dtype=f64)
    problem = linear_problem(a, torch.randn(6, dtype=f64), torch.randn(4, dtype=f64))
    out = jtj_apply(problem, p)
    expected = a.T @ a @ p
    assert float((out - expected).norm() / expected.norm()) < 1e-6
    with pytest.raises(ShapeError):
        jtj_apply(problem, torch.randn(5, dtype=f64))


def test_jtj_apply_on_small_classifier(f64):
    """测试小型两层分类器（不超过 200 个权重）上 JᵀJp 与显式组装的雅可比矩阵一致"""
    g = torch.Generator().manual_seed(1)
    memory = SampleMemory(capacity=5)
    for _ in range(3):
        memory.add_sample(torch.randn(4, 4, 3, generator=g, dtype=f64), torch.rand(4, 4, generator=g, dtype=f64))
    weights = ClassifierWeights(w1=torch.randn(1, 1, 3, 4, generator=g, dtype=f64),
                                w2=torch.randn(2, 2, 4, 1, generator=g, dtype=f64) * 0.3)
    assert weights.w1.numel() + weights.w2.numel() <= 200
    problem = ResidualProblem(lambda ws: residual_vector(memory, weights.with_tensors(ws)), weights.as_dict())

    def flat_residual(v: torch.Tensor) -> torch.Tensor:
        w1, w2 = v[:12].reshape(1, 1, 3, 4), v[12:].reshape(2, 2, 4, 1)
        return residual_vector(memory, weights.with_tensors({"w1": w1, "w2": w2}))

    v0 = torch.cat([weights.w1.reshape(-1), weights.w2.reshape(-1)])
    jacobian = torch.autograd.functional.jacobian(flat_residual, v0)
    p = torch.randn(v0.numel(), generator=g, dtype=f64)
    expected = jacobian.T @ (jacobian @ p)
    out = jtj_apply(problem, p)
    assert float((out - expected).norm() / expected.norm()) < 1e-6


def test_gradient_descent_on_quadratic(f64):
    """测试 ½‖w‖² 上 lr 0.5、无动量的梯度下降每步把 w 减半"""
    # r(w) = w/√2 使 ‖r‖² = ½‖w‖²，梯度为 w
    problem = ResidualProblem(lambda ws: ws["w"] / 2 ** 0.5, {"w": torch.tensor([8.0, -4.0], dtype=f64)})
    tape = Tape()
    run = gradient_descent(problem, steps=3, lr=0.5, tape=tape)
    assert torch.allclose(problem.weights["w"], torch.tensor([1.0, -0.5], dtype=f64))
    assert tape.backprop_calls == 3 == run.backprop_calls


def test_gradient_descent_divergence_and_validation(f64):
    """测试学习率过大时发散报错，非法学习率报错"""
    problem = ResidualProblem(lambda ws: 10.0 * ws["w"], {"w": torch.ones(2, dtype=f64)})
    with pytest.raises(ConvergenceError) as exc:
        gradient_descent(problem, steps=50, lr=1.0)
    assert exc.value.iteration is not None
    with pytest.raises(ValueError):
        gradient_descent(problem, steps=1, lr=0.0)


def test_minimize_budgets(f64):
    """测试 gd 与 GN-CG 预算相同，gd++ 为 5 倍"""
    g = torch.Generator().manual_seed(2)
    a = torch.randn(12, 5, generator=g, dtype=f64)
    b = torch.randn(12, generator=g, dtype=f64) * 0.5

    def fresh():
        return ResidualProblem(lambda ws: torch.tanh(a @ ws["w"]) - b, {"w": torch.zeros(5, dtype=f64)})

    assert minimize(fresh(), 2, 3, "gncg").backprop_calls == 14
    assert minimize(fresh(), 2, 3, "gd", gd_lr=0.1, gd_momentum=0.0).backprop_calls == 14
    assert minimize(fresh(), 2, 3, "gd++", gd_lr=0.1, gd_momentum=0.0).backprop_calls == 70
    with pytest.raises(ValueError):
        minimize(fresh(), 1, 1, "lbfgs")


def test_adam_steps(f64):
    """测试 ADAM：零梯度不变，首步为 −lr·g/(|g|+ε)，常数梯度下步长趋于 lr"""
    p = torch.tensor([1.0, -2.0], dtype=f64)
    state = AdamState.zeros_like([p])
    adam([p], [torch.zeros(2, dtype=f64)], state, lr=0.1)
    assert p.tolist() == [1.0, -2.0]

    p = torch.tensor([1.0, -2.0], dtype=f64)
    state = AdamState.zeros_like([p])
    g = torch.tensor([0.3, -4.0], dtype=f64)
    adam([p], [g], state, lr=0.1, eps=1e-8)
    expected = torch.tensor([1.0, -2.0], dtype=f64) - 0.1 * g / (g.abs() + 1e-8)
    assert torch.allclose(p, expected)

    for _ in range(200):
        before = p.clone()
        adam([p], [g], state, lr=0.1)
    assert torch.allclose((p - before).abs(), torch.full((2,), 0.1, dtype=f64), rtol=1e-3)
    with pytest.raises(ValueError):
        adam([p], [g], state, lr=-1.0)


def test_gauss_newton_loss_decreases_on_first_frame_problems(first_frame_set):
    """测试合成首帧分类器问题：至少 95% 的问题在每次 GN 迭代后损失严格下降"""
    decreasing = 0
    with precision("f64"):
        for memory, weights in first_frame_set:
            run = train_initial(memory, weights.clone(), n_gn=6, n_cg=10)
            losses = [loss for _, loss in run.loss_trace]
            assert len(losses) == 7
            decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 0.95 * len(first_frame_set)
