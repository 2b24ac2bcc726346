"""Mass-preserving transport of densities along a velocity-generated flow.

All recursions are first order on the fine grid ``tau_j = j / (M N)``:

* push step ``j = 1..MN``:
  ``rho_j = (1 - div v_j / MN) * rho_{j-1} o (Id - v_j / MN)``
* composition back step ``j = iM-1..0``:
  ``h_j = h_{j+1} o (Id + v_j / MN)``

Compositions are bilinear with zero extension outside the hull of pixel
centers. The divergence inside the push step is the central-difference one.

Besides the composition back step, the module exposes the exact transpose of
the push step (``scheme="adjoint"``). It transports residuals the same way to
first order but is the true adjoint of the discrete push-forward, which is what
a discretized objective needs for consistent gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import Grid, Sampler, ScalarField, TimeGrid, VectorField, div_central_array

SCHEMES = ("composition", "adjoint")


@dataclass(frozen=True)
class VelocityField:
    """Velocity frames ``v(tau_j, .)`` for ``j = 0..MN``; ``data`` has shape ``(MN+1, 2, nx, ny)``."""

    grid: Grid
    time_grid: TimeGrid
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=float)
        expect = (self.time_grid.steps + 1, 2) + self.grid.shape
        if arr.shape != expect:
            raise ValueError(f"velocity data shape {arr.shape}, expected {expect}")
        if not np.isfinite(arr).all():
            raise ValueError("velocity field has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, grid: Grid, time_grid: TimeGrid) -> "VelocityField":
        return cls(grid, time_grid, np.zeros((time_grid.steps + 1, 2) + grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, time_grid: TimeGrid, func: Callable) -> "VelocityField":
        """``func(t, X, Y) -> (ux, uy)`` evaluated at every fine time node."""
        X, Y = grid.meshgrid()
        frames = []
        for t in time_grid.tau:
            ux, uy = func(t, X, Y)
            frames.append(np.stack([np.broadcast_to(ux, grid.shape), np.broadcast_to(uy, grid.shape)]))
        return cls(grid, time_grid, np.stack(frames))

    def frame(self, j: int) -> VectorField:
        return VectorField(self.grid, self.data[j, 0], self.data[j, 1])


@dataclass(frozen=True)
class FrameSequence:
    """Scalar frames at every fine time node; ``data`` has shape ``(MN+1, nx, ny)``."""

    grid: Grid
    time_grid: TimeGrid
    data: np.ndarray
    clamp_count: int = field(default=0, compare=False)

    def frame(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.data[j])

    def gate(self, i: int) -> ScalarField:
        return self.frame(self.time_grid.gate_index(i))


# ---------------------------------------------------------------------------
# single steps on arrays


def is_zero_frame(vj: np.ndarray) -> bool:
    return not vj.any()


@dataclass
class PushStep:
    """Everything the reverse sweep needs from one push step."""

    sampler: Sampler | None   # None for an exactly zero velocity frame
    factor: np.ndarray | None  # clamped 1 - div v / MN
    active: np.ndarray | None  # where the unclamped factor is positive
    moved: np.ndarray         # rho_{j-1} o (Id - v_j / MN)
    clamped: int


def push_step(prev: np.ndarray, vj: np.ndarray, grid: Grid, steps: int) -> tuple[np.ndarray, PushStep]:
    if is_zero_frame(vj):
        return prev.copy(), PushStep(None, None, None, prev, 0)
    smp = Sampler.displaced(grid, vj[0], vj[1], -1.0 / steps)
    moved = smp.gather(prev)
    raw = 1.0 - div_central_array(vj, grid.dx, grid.dy) / steps
    active = raw > 0
    clamped = int(np.count_nonzero(~active))
    factor = np.where(active, raw, 0.0)
    return factor * moved, PushStep(smp, factor, active, moved, clamped)


def push_step_transpose(lam: np.ndarray, step: PushStep) -> np.ndarray:
    """Transpose of ``rho_{j-1} -> rho_j`` for fixed velocity."""
    if step.sampler is None:
        return lam
    return step.sampler.scatter(step.factor * lam)


def compose_back(h: np.ndarray, vj: np.ndarray, grid: Grid, steps: int) -> np.ndarray:
    """``h o (Id + v_j / MN)``."""
    if is_zero_frame(vj):
        return h
    return Sampler.displaced(grid, vj[0], vj[1], 1.0 / steps).gather(h)


# ---------------------------------------------------------------------------
# sequences


def push_forward_array(theta: np.ndarray, v: np.ndarray, grid: Grid, steps: int,
                       keep_steps: bool = False):
    frames = np.empty((steps + 1,) + theta.shape)
    frames[0] = theta
    record = []
    clamped = 0
    for j in range(1, steps + 1):
        frames[j], st = push_step(frames[j - 1], v[j], grid, steps)
        clamped += st.clamped
        if keep_steps:
            record.append(st)
    return frames, clamped, record


def push_forward(theta: ScalarField, v: VelocityField) -> FrameSequence:
    """Mass-preserving push-forward of ``theta``; returns all ``MN + 1`` frames."""
    if theta.grid != v.grid:
        raise ValueError("template and velocity live on different grids")
    if (theta.values < 0).any():
        raise ValueError("push_forward expects a nonnegative template")
    frames, clamped, _ = push_forward_array(theta.values, v.data, v.grid, v.time_grid.steps)
    return FrameSequence(v.grid, v.time_grid, frames, clamped)


def jac_det_sequence(v: VelocityField) -> FrameSequence:
    """Jacobian determinants ``|D phi_{tau_j, 0}|`` by the same recursion, started from 1."""
    frames, clamped, _ = push_forward_array(np.ones(v.grid.shape), v.data, v.grid, v.time_grid.steps)
    return FrameSequence(v.grid, v.time_grid, frames, clamped)


def back_transport_array(h_end: np.ndarray, v: np.ndarray, grid: Grid, steps: int, end: int,
                         scheme: str = "composition", record=None) -> np.ndarray:
    """Backward sequence ``h_j`` for ``j = 0..end`` with ``h_end`` at index ``end``."""
    out = np.empty((end + 1,) + h_end.shape)
    out[end] = h_end
    if scheme == "composition":
        for j in range(end - 1, -1, -1):
            out[j] = compose_back(out[j + 1], v[j], grid, steps)
    elif scheme == "adjoint":
        if record is None:
            raise ValueError("adjoint back-transport needs the recorded push steps")
        for j in range(end - 1, -1, -1):
            out[j] = push_step_transpose(out[j + 1], record[j])
    else:
        raise ValueError(f"unknown transport scheme {scheme!r}")
    return out


def back_transport(h_end: ScalarField, v: VelocityField, i: int, scheme: str = "composition",
                   theta: ScalarField | None = None) -> list[ScalarField]:
    """Transport ``h_end`` given at gate ``t_i`` back to every ``tau_j``, ``j = iM..0``.

    Returns the list indexed by ``j`` (so ``result[iM] == h_end``). With
    ``scheme="adjoint"`` the steps are exact transposes of the push steps; they
    do not depend on the template, which is only accepted for symmetry.
    """
    end = v.time_grid.gate_index(i)
    record = None
    if scheme == "adjoint":
        _, _, record = push_forward_array(np.zeros(v.grid.shape), v.data, v.grid,
                                          v.time_grid.steps, keep_steps=True)
    seq = back_transport_array(h_end.values, v.data, v.grid, v.time_grid.steps, end, scheme, record)
    return [ScalarField(v.grid, s) for s in seq]


def speed_squared(v: np.ndarray) -> np.ndarray:
    return v[:, 0] ** 2 + v[:, 1] ** 2


def eta_sequence_array(v: np.ndarray, grid: Grid, steps: int, end: int) -> np.ndarray:
    """``eta_{tau_j, t_i}`` for ``j = 0..end`` using the averaged sum over ``l = j+1..end``.

    ``S_j = (S_{j+1} + |v_{j+1}|^2) o (Id + v_j / MN)`` accumulates the inner
    compositions, and ``eta_j = S_j / (end - j)``.
    """
    sq = speed_squared(v)
    out = np.zeros((end + 1,) + grid.shape)
    acc = np.zeros(grid.shape)
    for j in range(end - 1, -1, -1):
        acc = compose_back(acc + sq[j + 1], v[j], grid, steps)
        out[j] = acc / (end - j)
    return out


def eta(v: VelocityField, j: int, i: int) -> ScalarField:
    end = v.time_grid.gate_index(i)
    if j > end or j < 0:
        raise ValueError(f"eta needs 0 <= j <= iM, got j={j}, iM={end}")
    seq = eta_sequence_array(v.data, v.grid, v.time_grid.steps, end)
    return ScalarField(v.grid, seq[j])


def continuity_residual(frames: FrameSequence, v: VelocityField) -> np.ndarray:
    """Discrete residual ``(rho_j - rho_{j-1}) MN + div(rho_{j-1} v_j)`` in L2 per step."""
    g = v.grid
    steps = v.time_grid.steps
    out = np.empty(steps)
    for j in range(1, steps + 1):
        flux = frames.data[j - 1][None] * v.data[j]
        r = (frames.data[j] - frames.data[j - 1]) * steps + div_central_array(flux, g.dx, g.dy)
        out[j - 1] = np.sqrt(np.sum(r ** 2) * g.cell_area)
    return out
