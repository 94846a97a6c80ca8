import math
from typing import Callable, Dict, List, Optional, Sequence

import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from models.errors import ConvergenceError, ShapeError
from models.tracking import OptimizerRun
from services.autodiff import Tape

# CG 中防止除零的阈值
CG_TOLERANCE = 1e-12
# 梯度下降损失超过初始损失该倍数时视为发散
DIVERGENCE_FACTOR = 1e3


class ResidualProblem:
    """非线性最小二乘问题 L(w) = ‖r(w)‖²

    Args:
        evaluate: 输入权重字典，返回残差（任意形状，内部展平为向量）
        weights: 当前权重，优化器原地替换其中的张量
        trainable: 参与优化的权重名，其余权重在计算图中视为常量
    """

    def __init__(
        self,
        evaluate: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
        weights: Dict[str, torch.Tensor],
        trainable: Optional[Sequence[str]] = None,
    ):
        self.evaluate = evaluate
        self.weights = weights
        self.trainable = list(trainable) if trainable is not None else list(weights)
        unknown = set(self.trainable) - set(weights)
        if unknown:
            raise KeyError(f"Unknown trainable weights: {sorted(unknown)}")

    def residual(self, weights: Dict[str, torch.Tensor]) -> torch.Tensor:
        return self.evaluate(weights).reshape(-1)

    def loss(self) -> float:
        with torch.no_grad():
            r = self.residual({k: v.detach() for k, v in self.weights.items()})
        return float((r * r).sum())

    def watch(self, tape: Tape) -> Dict[str, torch.Tensor]:
        """返回一份权重副本：可训练权重登记到微分带上，其余权重 detach"""
        return {
            name: tape.watch(value) if name in self.trainable else value.detach()
            for name, value in self.weights.items()
        }

    def apply_step(self, step: List[torch.Tensor]) -> None:
        for name, delta in zip(self.trainable, step):
            self.weights[name] = (self.weights[name].detach() + delta.detach()).contiguous()


def _flatten(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])


def _unflatten(vector: torch.Tensor, like: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    out, offset = [], 0
    for t in like:
        out.append(vector[offset:offset + t.numel()].reshape(t.shape))
        offset += t.numel()
    return out


def _checked_loss(r: torch.Tensor, method: str, iteration: int) -> float:
    loss = float((r.detach() ** 2).sum())
    if not math.isfinite(loss):
        logger.error(f"{method}: non-finite loss at iteration {iteration}")
        raise ConvergenceError(f"{method}: non-finite loss at iteration {iteration}", iteration=iteration)
    return loss


def gauss_newton_cg(problem: ResidualProblem, run: OptimizerRun, tape: Optional[Tape] = None) -> OptimizerRun:
    """高斯-牛顿外循环 + 共轭梯度内循环，全部通过 BackProp 调用实现

    每个外循环 1 次 BackProp（h = Jᵀu），每个 CG 迭代 2 次（q1 = Jp，q2 = Jᵀq1），
    不显式构造雅可比矩阵。步长 α 与方向混合系数 β 均由迭代计算得到。

    Args:
        problem: 残差问题，权重被原地更新为 w + Δw
        run: 迭代次数设置，损失轨迹写入其中
        tape: 可选的微分带（用于统计调用次数）

    Returns:
        填充了 loss_trace 与 backprop_calls 的 run
    """
    if run.n_gn < 1 or run.n_cg < 1:
        raise ValueError(f"gauss_newton_cg: N_GN and N_CG must be >= 1, got {run.n_gn}, {run.n_cg}")
    tape = tape or Tape("gncg")
    start_calls = tape.backprop_calls

    for it in range(run.n_gn):
        watched = problem.watch(tape)
        w_list = [watched[name] for name in problem.trainable]
        r = problem.residual(watched)
        loss = _checked_loss(r, "gauss_newton_cg", it)
        run.loss_trace.append((tape.backprop_calls - start_calls, loss))

        # u 视为常量，h = Jᵀu 关于 u 线性
        u = tape.watch(r.detach())
        h = tape.backprop((r * u).sum(), w_list, create_graph=True)
        g = -_flatten(h).detach()
        p = torch.zeros_like(g)
        dw = torch.zeros_like(g)
        rho1 = torch.ones((), dtype=g.dtype)

        for cg_it in range(run.n_cg):
            rho2 = rho1
            rho1 = g.dot(g)
            if rho1 < CG_TOLERANCE:
                logger.debug(f"GN {it}: CG stopped at {cg_it}, residual gradient vanished")
                break
            p = g + (rho1 / rho2) * p
            hp = sum((hi * pi).sum() for hi, pi in zip(h, _unflatten(p, w_list)))
            q1 = tape.backprop(hp, [u])[0].detach()
            q2 = _flatten(tape.backprop((r * q1).sum(), w_list)).detach()
            curvature = q2.dot(p)
            if curvature <= CG_TOLERANCE:
                logger.debug(f"GN {it}: CG stopped at {cg_it}, non-positive curvature {float(curvature):.3g}")
                break
            alpha = rho1 / curvature
            g = g - alpha * q2
            dw = dw + alpha * p

        problem.apply_step(_unflatten(dw, w_list))
        logger.debug(f"GN {it}: loss {loss:.6g}, |Δw| {float(dw.norm()):.3g}")

    final = problem.loss()
    if not math.isfinite(final):
        raise ConvergenceError(f"gauss_newton_cg: non-finite loss after iteration {run.n_gn - 1}",
                               iteration=run.n_gn - 1)
    run.backprop_calls = tape.backprop_calls - start_calls
    run.loss_trace.append((run.backprop_calls, final))
    return run


def jtj_apply(problem: ResidualProblem, p: torch.Tensor, tape: Optional[Tape] = None) -> torch.Tensor:
    """通过三次 BackProp 计算 JᵀJp（p 为展平后的可训练权重方向）"""
    tape = tape or Tape("jtj")
    watched = problem.watch(tape)
    w_list = [watched[name] for name in problem.trainable]
    expected = sum(w.numel() for w in w_list)
    if p.numel() != expected:
        raise ShapeError("jtj_apply", p.shape, (expected,), "direction must match flattened weights")

    r = problem.residual(watched)
    u = tape.watch(r.detach())
    h = tape.backprop((r * u).sum(), w_list, create_graph=True)
    p = p.reshape(-1).detach().to(r.dtype)
    hp = sum((hi * pi).sum() for hi, pi in zip(h, _unflatten(p, w_list)))
    q1 = tape.backprop(hp, [u])[0].detach()
    return _flatten(tape.backprop((r * q1).sum(), w_list)).detach()


def gradient_descent(
    problem: ResidualProblem,
    steps: int,
    lr: float,
    momentum: float = 0.0,
    tape: Optional[Tape] = None,
    run: Optional[OptimizerRun] = None,
) -> OptimizerRun:
    """带动量的梯度下降，每步一次 BackProp，轨迹按 BackProp 调用次数记录"""
    if lr <= 0:
        raise ValueError(f"gradient_descent: lr must be positive, got {lr}")
    if steps < 0:
        raise ValueError(f"gradient_descent: steps must be >= 0, got {steps}")
    tape = tape or Tape("gd")
    run = run or OptimizerRun(method="gd")
    start_calls = tape.backprop_calls
    velocity: Optional[List[torch.Tensor]] = None
    initial: Optional[float] = None

    for step in range(steps):
        watched = problem.watch(tape)
        w_list = [watched[name] for name in problem.trainable]
        r = problem.residual(watched)
        loss = _checked_loss(r, "gradient_descent", step)
        if initial is None:
            initial = loss
        elif loss > DIVERGENCE_FACTOR * max(initial, 1e-30):
            logger.error(f"gradient_descent: diverged at step {step} (loss {loss:.3g}, initial {initial:.3g})")
            raise ConvergenceError(f"gradient_descent: diverged at step {step}", iteration=step)
        run.loss_trace.append((tape.backprop_calls - start_calls, loss))

        grads = [g.detach() for g in tape.backprop((r * r).sum(), w_list)]
        if velocity is None:
            velocity = [torch.zeros_like(g) for g in grads]
        velocity = [momentum * v - lr * g for v, g in zip(velocity, grads)]
        problem.apply_step(velocity)

    final = problem.loss()
    if not math.isfinite(final) or (initial is not None and final > DIVERGENCE_FACTOR * max(initial, 1e-30)):
        raise ConvergenceError(f"gradient_descent: diverged after {steps} steps", iteration=steps)
    run.backprop_calls = tape.backprop_calls - start_calls
    run.loss_trace.append((run.backprop_calls, final))
    return run


def minimize(
    problem: ResidualProblem,
    n_gn: int,
    n_cg: int,
    method: str = "gncg",
    tape: Optional[Tape] = None,
    gd_lr: float = 0.5,
    gd_momentum: float = 0.9,
    gdpp_factor: int = 5,
) -> OptimizerRun:
    """按指定方法优化；gd 与 GN-CG 使用相同的 BackProp 预算，gd++ 为其 gdpp_factor 倍"""
    run = OptimizerRun(n_gn=n_gn, n_cg=n_cg, method=method)
    if method == "gncg":
        return gauss_newton_cg(problem, run, tape)
    if method in ("gd", "gd++"):
        budget = run.expected_calls * (gdpp_factor if method == "gd++" else 1)
        return gradient_descent(problem, budget, gd_lr, gd_momentum, tape=tape, run=run)
    raise ValueError(f"Unknown optimizer '{method}'")


# ---------------------------------------------------------------------------
# ADAM（IoU 网络离线训练）
# ---------------------------------------------------------------------------

class AdamState(BaseModel):
    """ADAM 的一阶/二阶矩估计与步数"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = Field(0, ge=0)
    exp_avg: List[torch.Tensor]
    exp_avg_sq: List[torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(
            exp_avg=[torch.zeros_like(p).detach() for p in params],
            exp_avg_sq=[torch.zeros_like(p).detach() for p in params],
        )


def adam(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """带偏差修正的 ADAM 单步更新，参数原地修改

    梯度为 None 的参数按零梯度处理。
    """
    if lr <= 0:
        raise ValueError(f"adam: lr must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ValueError("adam: params, grads and state lengths differ")
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if m.shape != p.shape:
                raise ShapeError("adam", p.shape, m.shape, "state shape differs from parameter")
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bias1) / ((v / bias2).sqrt() + eps))
    return state
