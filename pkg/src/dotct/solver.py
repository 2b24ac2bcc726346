"""Joint template / velocity reconstruction from gated data.

The discrete objective is

    J = (1/N) sum_i [ ||A_i rho_{iM} - g_i||^2 + mu2/(MN) sum_{j=1}^{iM} <rho_j, |v_j|^2> ]
        + mu1 * sum sqrt(|grad theta|^2 + eps) dA

with ``rho`` the mass-preserving push-forward of ``theta``. Two gradient
schemes are available:

``"discrete"``
    The exact derivative of the discrete objective, obtained by a reverse
    sweep through the push steps (default; passes finite-difference checks).
``"composition"``
    The composition formulas ``h_{j} = h_{j+1} o (Id + v_j/MN)`` and ``eta``
    assembled into ``rho_j [grad(h + mu2 eta) + 2 mu2 v_j]``. They agree with
    the discrete scheme to first order in ``1/MN``.

Velocity gradients are returned before and after the kernel; descent uses the
smoothed one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fields import (Grid, Sampler, ScalarField, TimeGrid, div_array, div_central_transpose,
                     grad_array, grad_central_array)
from .flow import (VelocityField, back_transport_array, eta_sequence_array, push_forward_array,
                   push_step_transpose, speed_squared)
from .projector import Geometry, IdentityTransform, RayTransform, Sinogram
from .rkhs import KernelOp

log = logging.getLogger(__name__)

FORWARD_MODES = ("radon", "identity")
GRADIENT_SCHEMES = ("discrete", "composition")
ORDERS = ("template_first", "velocity_first")


class NumericalError(RuntimeError):
    """Raised when an iterate or the objective stops being finite."""


@dataclass(frozen=True)
class Gate:
    geometry: Geometry | None
    data: np.ndarray


def _as_gate(item) -> Gate:
    if isinstance(item, Gate):
        return item
    geom, data = item
    if isinstance(data, (Sinogram, ScalarField)):
        data = data.values
    return Gate(geom, np.asarray(data, dtype=float))


@dataclass(frozen=True, eq=False)
class Problem:
    grid: Grid
    time_grid: TimeGrid
    gates: tuple
    mu1: float
    mu2: float
    eps_tv: float
    kernel: KernelOp
    forward_mode: str = "radon"
    scheme: str = "discrete"
    operators: tuple = field(default=(), repr=False)

    def __post_init__(self):
        gates = tuple(_as_gate(g) for g in self.gates)
        if len(gates) != self.time_grid.N:
            raise ValueError(f"{len(gates)} gates for N={self.time_grid.N}")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ValueError("regularization weights must be >= 0")
        if not self.eps_tv > 0:
            raise ValueError("eps_tv must be > 0")
        if self.forward_mode not in FORWARD_MODES:
            raise ValueError(f"unknown forward mode {self.forward_mode!r}")
        if self.scheme not in GRADIENT_SCHEMES:
            raise ValueError(f"unknown gradient scheme {self.scheme!r}")
        if self.kernel.grid != self.grid:
            raise ValueError("kernel grid differs from problem grid")
        ops = []
        for g in gates:
            if self.forward_mode == "radon":
                if g.geometry is None:
                    raise ValueError("radon mode needs a geometry per gate")
                op = RayTransform(self.grid, g.geometry)
            else:
                op = IdentityTransform(self.grid)
            if g.data.shape != tuple(op.data_shape):
                raise ValueError(f"gate data shape {g.data.shape} != {tuple(op.data_shape)}")
            if not np.isfinite(g.data).all():
                raise ValueError("gate data has non-finite entries")
            ops.append(op)
        object.__setattr__(self, "gates", gates)
        object.__setattr__(self, "operators", tuple(ops))

    @property
    def N(self) -> int:
        return self.time_grid.N

    def subproblem(self, gate_indices, M: int = 1) -> "Problem":
        """Problem restricted to the listed gates (1-based), with its own time grid."""
        gates = tuple(self.gates[i - 1] for i in gate_indices)
        return replace(self, gates=gates, time_grid=TimeGrid(len(gates), M), operators=())

    def with_weights(self, **kw) -> "Problem":
        return replace(self, operators=(), **kw)


@dataclass(frozen=True)
class SolverConfig:
    alpha: float
    beta: float
    K: int
    K_theta: int = 1
    K_v: int = 1
    tol_theta: float = 0.0
    tol_v: float = 0.0
    order: str = "template_first"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("step sizes must be > 0")
        if self.K < 0 or self.K_theta < 0 or self.K_v < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.order not in ORDERS:
            raise ValueError(f"unknown update order {self.order!r}")


@dataclass(frozen=True)
class Solution:
    template: ScalarField
    velocity: VelocityField
    gate_images: tuple
    objective_history: tuple
    term_history: tuple = ()
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# forward evaluation


@dataclass
class _State:
    theta: np.ndarray
    v: np.ndarray
    frames: np.ndarray
    record: list
    clamped: int
    residuals: list
    data: float
    transport: float
    tv: float

    @property
    def J(self) -> float:
        return self.data + self.transport + self.tv


def _check_inputs(theta: np.ndarray, v: np.ndarray, P: Problem):
    if theta.shape != P.grid.shape:
        raise ValueError(f"template shape {theta.shape} != grid {P.grid.shape}")
    if v.shape != (P.time_grid.steps + 1, 2) + P.grid.shape:
        raise ValueError(f"velocity shape {v.shape} does not match the problem")
    if (theta < 0).any():
        raise ValueError("template must be nonnegative")


def _reach_counts(tg: TimeGrid) -> np.ndarray:
    return np.array([0] + [tg.gates_reaching(j) for j in range(1, tg.steps + 1)], dtype=float)


def tv_value(theta: np.ndarray, grid: Grid, eps: float) -> float:
    g = grad_array(theta, grid.dx, grid.dy)
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2 + eps)) * grid.cell_area)


def tv_gradient(theta: np.ndarray, grid: Grid, eps: float) -> np.ndarray:
    """``-div(grad theta / |grad theta|_eps)``, the L2 gradient of the smoothed TV."""
    g = grad_array(theta, grid.dx, grid.dy)
    mag = np.sqrt(g[0] ** 2 + g[1] ** 2 + eps)
    return -div_array(g / mag, grid.dx, grid.dy)


def _evaluate(theta: np.ndarray, v: np.ndarray, P: Problem, keep: bool = True) -> _State:
    tg, grid = P.time_grid, P.grid
    frames, clamped, record = push_forward_array(theta, v, grid, tg.steps, keep_steps=keep)
    residuals = []
    data = 0.0
    for i, (op, gate) in enumerate(zip(P.operators, P.gates), start=1):
        r = op.apply(frames[tg.gate_index(i)]) - gate.data
        residuals.append(r)
        data += op.inner_weight * float(np.sum(r * r))
    data /= tg.N
    transport = 0.0
    if P.mu2 > 0:
        n = _reach_counts(tg)
        sq = speed_squared(v)
        per_step = np.einsum("jxy,jxy->j", frames[1:], sq[1:])
        transport = P.mu2 * grid.cell_area * float(np.dot(n[1:], per_step)) / (tg.N * tg.steps)
    tv = P.mu1 * tv_value(theta, grid, P.eps_tv) if P.mu1 > 0 else 0.0
    return _State(theta, v, frames, record, clamped, residuals, data, transport, tv)


def objective_terms(theta: ScalarField, v: VelocityField, P: Problem) -> dict:
    """Weighted data, transport and TV terms and their sum ``J``."""
    _check_inputs(theta.values, v.data, P)
    st = _evaluate(theta.values, v.data, P, keep=False)
    return {"J": st.J, "data": st.data, "transport": st.transport, "tv": st.tv}


def objective(theta: ScalarField, v: VelocityField, P: Problem) -> float:
    return objective_terms(theta, v, P)["J"]


# ---------------------------------------------------------------------------
# gradients


def _data_seeds(st: _State, P: Problem) -> list[np.ndarray]:
    """``(1/N) * 2 A_i^*(A_i rho_{iM} - g_i)`` per gate."""
    return [2.0 * op.adjoint_apply(r) / P.N for op, r in zip(P.operators, st.residuals)]


def _reverse_sweep(st: _State, P: Problem, want_velocity: bool):
    """Adjoint states ``lambda_j`` and, optionally, the pre-kernel velocity gradient."""
    tg, grid = P.time_grid, P.grid
    steps, N = tg.steps, tg.N
    seeds = _data_seeds(st, P)
    n = _reach_counts(tg)
    sq = speed_squared(st.v)
    coef = P.mu2 / (N * steps)
    G = np.zeros_like(st.v) if want_velocity else None
    lam = np.zeros(grid.shape)
    for j in range(steps, 0, -1):
        if j % tg.M == 0:
            lam = lam + seeds[j // tg.M - 1]
        if P.mu2 > 0:
            lam = lam + coef * n[j] * sq[j]
        step = st.record[j - 1]
        if want_velocity:
            prev = st.frames[j - 1]
            if step.sampler is None:
                smp = Sampler.displaced(grid, np.zeros(grid.shape), np.zeros(grid.shape), 0.0)
                moved, factor, active = prev, 1.0, np.ones(grid.shape, dtype=bool)
            else:
                smp, moved, factor, active = step.sampler, step.moved, step.factor, step.active
            dgrad = smp.gradient(prev, grid.dx, grid.dy)
            G[j] = -div_central_transpose(np.where(active, lam * moved, 0.0), grid.dx, grid.dy)
            G[j] -= (lam * factor) * dgrad
            if P.mu2 > 0:
                G[j] += (2.0 * P.mu2 * n[j] / N) * st.frames[j] * st.v[j]
        lam = push_step_transpose(lam, step)
    return lam, G


def _composition_template_part(st: _State, P: Problem) -> np.ndarray:
    tg, grid = P.time_grid, P.grid
    seeds = _data_seeds(st, P)
    out = np.zeros(grid.shape)
    for i in range(1, tg.N + 1):
        end = tg.gate_index(i)
        h = back_transport_array(seeds[i - 1], st.v, grid, tg.steps, end, "composition")
        out += h[0]
        if P.mu2 > 0:
            out += (P.mu2 / tg.N) * eta_sequence_array(st.v, grid, tg.steps, end)[0]
    return out


def _composition_velocity_part(st: _State, P: Problem) -> np.ndarray:
    tg, grid = P.time_grid, P.grid
    seeds = _data_seeds(st, P)
    G = np.zeros_like(st.v)
    for i in range(1, tg.N + 1):
        end = tg.gate_index(i)
        h = back_transport_array(seeds[i - 1], st.v, grid, tg.steps, end, "composition")
        if P.mu2 > 0:
            h = h + (P.mu2 / tg.N) * eta_sequence_array(st.v, grid, tg.steps, end)
        for j in range(end + 1):
            G[j] += grad_central_array(h[j], grid.dx, grid.dy)
            if P.mu2 > 0:
                G[j] += (2.0 * P.mu2 / tg.N) * st.v[j]
    return st.frames[:, None] * G


def _grad_template_state(st: _State, P: Problem) -> np.ndarray:
    if P.scheme == "discrete":
        g, _ = _reverse_sweep(st, P, want_velocity=False)
    else:
        g = _composition_template_part(st, P)
    if P.mu1 > 0:
        g = g + P.mu1 * tv_gradient(st.theta, P.grid, P.eps_tv)
    return g


def _grad_velocity_state(st: _State, P: Problem) -> np.ndarray:
    if P.scheme == "discrete":
        _, G = _reverse_sweep(st, P, want_velocity=True)
        return G
    return _composition_velocity_part(st, P)


def grad_template(theta: ScalarField, v: VelocityField, P: Problem) -> ScalarField:
    """L2 gradient of ``J`` with respect to the template."""
    _check_inputs(theta.values, v.data, P)
    st = _evaluate(theta.values, v.data, P)
    return ScalarField(P.grid, _grad_template_state(st, P))


def grad_velocity(theta: ScalarField, v: VelocityField, P: Problem, smooth: bool = True) -> VelocityField:
    """Velocity gradient; ``smooth=False`` returns the pre-kernel field ``G``.

    ``G`` is the gradient for the pairing ``(1/MN) sum_j <G_j, w_j>_{L2}``.
    """
    _check_inputs(theta.values, v.data, P)
    st = _evaluate(theta.values, v.data, P)
    G = _grad_velocity_state(st, P)
    if smooth:
        G = P.kernel.apply_array(G)
    return VelocityField(P.grid, P.time_grid, G)


def kkt_residual(theta: np.ndarray, grad: np.ndarray, grid: Grid) -> float:
    """``||min(theta, grad J)||`` which vanishes at a nonnegativity-constrained stationary point."""
    return float(np.sqrt(np.sum(np.minimum(theta, grad) ** 2) * grid.cell_area))


# ---------------------------------------------------------------------------
# descent steps


def _template_update(st: _State, P: Problem, alpha: float) -> np.ndarray:
    return np.maximum(st.theta - alpha * _grad_template_state(st, P), 0.0)


def _velocity_update(st: _State, P: Problem, beta: float) -> np.ndarray:
    return st.v - beta * P.kernel.apply_array(_grad_velocity_state(st, P))


def step_template(theta: ScalarField, v: VelocityField, P: Problem, alpha: float) -> ScalarField:
    """One projected gradient step ``max(theta - alpha grad J, 0)``."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    _check_inputs(theta.values, v.data, P)
    return ScalarField(P.grid, _template_update(_evaluate(theta.values, v.data, P), P, alpha))


def step_velocity(theta: ScalarField, v: VelocityField, P: Problem, beta: float) -> VelocityField:
    """One smoothed gradient step ``v - beta K(G)``."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    _check_inputs(theta.values, v.data, P)
    return VelocityField(P.grid, P.time_grid,
                         _velocity_update(_evaluate(theta.values, v.data, P), P, beta))


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-30))


def _guard(st: _State, what: str, step: float):
    if not math.isfinite(st.J):
        raise NumericalError(f"objective became non-finite after a {what} update; "
                             f"step size {step:g} is probably too large")


def project_template(theta: np.ndarray, v: np.ndarray, P: Problem, alpha: float, iters: int) -> np.ndarray:
    """Projected gradient descent on the template with the velocity fixed."""
    st = _evaluate(theta, v, P)
    for _ in range(iters):
        st = _evaluate(_template_update(st, P, alpha), v, P)
        _guard(st, "template", alpha)
    return st.theta


def descend_velocity(theta: np.ndarray, v: np.ndarray, P: Problem, beta: float, iters: int) -> np.ndarray:
    """Smoothed gradient descent on the velocity with the template fixed."""
    st = _evaluate(theta, v, P)
    for _ in range(iters):
        st = _evaluate(theta, _velocity_update(st, P, beta), P)
        _guard(st, "velocity", beta)
    return st.v


# ---------------------------------------------------------------------------
# warm starts and drivers


@dataclass(frozen=True)
class WarmStart:
    """``static_tv``: k0 template steps with v = 0 on all gates.

    ``first_gate``: k0 template steps on gate 1 alone, then k1 velocity steps
    on all gates with that template held fixed.
    """

    strategy: str = "static_tv"
    k0: int = 0
    k1: int = 0

    def __post_init__(self):
        if self.strategy not in ("static_tv", "first_gate", "none"):
            raise ValueError(f"unknown warm-start strategy {self.strategy!r}")
        if self.k0 < 0 or self.k1 < 0:
            raise ValueError("warm-start iteration counts must be >= 0")


def warm_start(P: Problem, ws: WarmStart, alpha: float, beta: float) -> tuple[ScalarField, VelocityField]:
    theta = np.zeros(P.grid.shape)
    v = np.zeros((P.time_grid.steps + 1, 2) + P.grid.shape)
    if ws.strategy == "static_tv":
        theta = project_template(theta, v, P, alpha, ws.k0)
    elif ws.strategy == "first_gate":
        sub = P.subproblem([1])
        theta = project_template(theta, np.zeros((2, 2) + P.grid.shape), sub, alpha, ws.k0)
        v = descend_velocity(theta, v, P, beta, ws.k1)
    return ScalarField(P.grid, theta), VelocityField(P.grid, P.time_grid, v)


def _solution(st: _State, P: Problem, history, terms, diag) -> Solution:
    tg = P.time_grid
    gates = tuple(ScalarField(P.grid, st.frames[tg.gate_index(i)]) for i in range(1, tg.N + 1))
    diag = dict(diag)
    diag["clamp_count"] = st.clamped
    diag["masses"] = [float(np.sum(g.values) * P.grid.cell_area) for g in gates]
    diag["template_mass"] = float(np.sum(st.theta) * P.grid.cell_area)
    return Solution(ScalarField(P.grid, st.theta), VelocityField(P.grid, tg, st.v), gates,
                    tuple(history), tuple(terms), diag)


def alternate(P: Problem, cfg: SolverConfig, init: tuple[ScalarField, VelocityField] | None = None,
              ws: WarmStart | None = None, callback=None) -> Solution:
    """Alternating projected template descent and smoothed velocity descent.

    Stops after ``cfg.K`` outer iterations or once both relative changes drop
    below their tolerances (only when at least one tolerance is positive).
    """
    if init is None:
        init = warm_start(P, ws or WarmStart(), cfg.alpha, cfg.beta)
    theta, v = init
    _check_inputs(theta.values, v.data, P)
    st = _evaluate(np.array(theta.values), np.array(v.data), P)
    _guard(st, "warm-start", cfg.alpha)
    history = [st.J]
    terms = [(st.data, st.transport, st.tv)]
    kkt = []
    stop = "max_iterations"
    k = 0
    for k in range(1, cfg.K + 1):
        theta_old, v_old = st.theta, st.v
        for part in ((0, 1) if cfg.order == "template_first" else (1, 0)):
            if part == 0:
                for _ in range(cfg.K_theta):
                    st = _evaluate(_template_update(st, P, cfg.alpha), st.v, P)
                    _guard(st, "template", cfg.alpha)
            else:
                for _ in range(cfg.K_v):
                    st = _evaluate(st.theta, _velocity_update(st, P, cfg.beta), P)
                    _guard(st, "velocity", cfg.beta)
        history.append(st.J)
        terms.append((st.data, st.transport, st.tv))
        kkt.append(kkt_residual(st.theta, _grad_template_state(st, P), P.grid))
        if callback is not None:
            callback(k, st.J)
        log.debug("iter %d J=%.6e", k, st.J)
        if (cfg.tol_theta > 0 or cfg.tol_v > 0) \
                and _rel_change(st.theta, theta_old) < cfg.tol_theta \
                and _rel_change(st.v, v_old) < cfg.tol_v:
            stop = "tolerance"
            break
    diag = {"iterations": k if cfg.K > 0 else 0, "stop_reason": stop, "kkt_history": kkt}
    return _solution(st, P, history, terms, diag)


def tv_baseline(grid: Grid, gates, mu1: float, eps_tv: float, alpha: float, iters: int,
                forward_mode: str = "radon") -> ScalarField:
    """Static smoothed-TV least squares on the pooled ``gates`` (v = 0)."""
    from .rkhs import make_kernel_op
    P = Problem(grid, TimeGrid(len(gates), 1), tuple(gates), mu1, 0.0, eps_tv,
                make_kernel_op(grid, 1.0, "identity"), forward_mode)
    v = np.zeros((P.time_grid.steps + 1, 2) + grid.shape)
    return ScalarField(grid, project_template(np.zeros(grid.shape), v, P, alpha, iters))


def per_gate_tv(P: Problem, alpha: float, iters: int, mu1: float | None = None) -> list[ScalarField]:
    """Independent TV reconstruction of each gate's data."""
    mu1 = P.mu1 if mu1 is None else mu1
    return [tv_baseline(P.grid, [g], mu1, P.eps_tv, alpha, iters, P.forward_mode) for g in P.gates]


def data_lipschitz(P: Problem, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of the Lipschitz constant of the data-term gradient at v = 0."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(P.grid.shape)
    lam = 0.0
    for _ in range(iters):
        x /= np.linalg.norm(x)
        y = sum(op.adjoint_apply(op.apply(x)) for op in P.operators) * (2.0 / P.N)
        lam = float(np.vdot(x, y))
        x = y
    return lam


def write_objective_csv(path, sol: Solution) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "J", "data", "transport", "tv"])
        for k, J in enumerate(sol.objective_history):
            d, t, r = sol.term_history[k] if k < len(sol.term_history) else ("", "", "")
            w.writerow([k, repr(J), repr(d), repr(t), repr(r)])
    return path
