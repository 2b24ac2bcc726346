"""Grids, scalar and vector fields, and the discrete calculus shared by all modules.

Arrays are indexed ``values[ix, iy]`` with ``ix`` running along x. Pixel
centers sit at ``x0 + (ix + 1/2) * dx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform pixel grid on the box ``[x0, x1] x [y0, y1]``."""

    nx: int
    ny: int
    extent: tuple[float, float, float, float]

    def __post_init__(self):
        if int(self.nx) < 2 or int(self.ny) < 2:
            raise ValueError(f"grid needs at least 2x2 pixels, got {self.nx}x{self.ny}")
        x0, x1, y0, y1 = (float(e) for e in self.extent)
        if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate grid extent {self.extent}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "extent", (x0, x1, y0, y1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def dx(self) -> float:
        return (self.extent[1] - self.extent[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.extent[3] - self.extent[2]) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def area(self) -> float:
        return (self.extent[1] - self.extent[0]) * (self.extent[3] - self.extent[2])

    @property
    def x(self) -> np.ndarray:
        return self.extent[0] + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y(self) -> np.ndarray:
        return self.extent[2] + (np.arange(self.ny) + 0.5) * self.dy

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def to_world(self, ix, iy):
        """Map (possibly fractional) pixel indices to world coordinates."""
        ix = np.asarray(ix, dtype=float)
        iy = np.asarray(iy, dtype=float)
        return (self.extent[0] + (ix + 0.5) * self.dx,
                self.extent[2] + (iy + 0.5) * self.dy)

    def to_index(self, x, y):
        """Inverse of :meth:`to_world`; returns fractional indices."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return ((x - self.extent[0]) / self.dx - 0.5,
                (y - self.extent[2]) / self.dy - 0.5)


def make_grid(nx: int, ny: int, extent) -> Grid:
    return Grid(nx, ny, tuple(extent))


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    nonnegative: bool = field(default=False, compare=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("scalar field has non-finite entries")
        if self.nonnegative and (vals < 0).any():
            raise ValueError("density field has negative entries")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable) -> "ScalarField":
        X, Y = grid.meshgrid()
        return cls(grid, np.broadcast_to(func(X, Y), grid.shape))


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self):
        ux, uy = _frozen(self.ux), _frozen(self.uy)
        if ux.shape != self.grid.shape or uy.shape != self.grid.shape:
            raise ValueError("vector field components do not match grid")
        if not (np.isfinite(ux).all() and np.isfinite(uy).all()):
            raise ValueError("vector field has non-finite entries")
        object.__setattr__(self, "ux", ux)
        object.__setattr__(self, "uy", uy)

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape))

    def stack(self) -> np.ndarray:
        return np.stack([self.ux, self.uy])


@dataclass(frozen=True)
class TimeGrid:
    """Fine time grid ``tau_j = j / (M N)``; gate ``i`` sits at fine index ``i M``."""

    N: int
    M: int

    def __post_init__(self):
        if int(self.N) < 1 or int(self.M) < 1:
            raise ValueError(f"need N >= 1 and M >= 1, got N={self.N}, M={self.M}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "M", int(self.M))

    @property
    def steps(self) -> int:
        return self.M * self.N

    @property
    def tau(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.steps

    @property
    def gate_times(self) -> np.ndarray:
        return np.arange(self.N + 1) / self.N

    def gate_index(self, i: int) -> int:
        if not 0 <= i <= self.N:
            raise ValueError(f"gate {i} outside 0..{self.N}")
        return i * self.M

    def gates_reaching(self, j: int) -> int:
        """Number of gates ``i >= 1`` with ``i M >= j``."""
        return self.N - max(-(-j // self.M), 1) + 1


# ---------------------------------------------------------------------------
# discrete calculus on raw arrays


def grad_array(f: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Forward differences; the last row/column (replicate boundary) is zero."""
    g = np.zeros((2,) + f.shape)
    g[0, :-1, :] = (f[1:, :] - f[:-1, :]) / dx
    g[1, :, :-1] = (f[:, 1:] - f[:, :-1]) / dy
    return g


def div_array(p: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Backward differences, the exact negative transpose of :func:`grad_array`."""
    px, py = p[0], p[1]
    d = np.zeros(px.shape)
    d[:-1, :] += px[:-1, :] / dx
    d[1:, :] -= px[:-1, :] / dx
    d[:, :-1] += py[:, :-1] / dy
    d[:, 1:] -= py[:, :-1] / dy
    return d


def _central_1d(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = f[2:] - f[:-2]
    out[0] = f[1] - f[0]
    out[-1] = f[-1] - f[-2]
    return np.moveaxis(out / (2.0 * h), 0, axis)


def _central_1d_T(q: np.ndarray, h: float, axis: int) -> np.ndarray:
    q = np.moveaxis(q, axis, 0) / (2.0 * h)
    out = np.zeros_like(q)
    out[2:] += q[1:-1]
    out[:-2] -= q[1:-1]
    out[1] += q[0]
    out[0] -= q[0]
    out[-1] += q[-1]
    out[-2] -= q[-1]
    return np.moveaxis(out, 0, axis)


def grad_central_array(f: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Central differences with replicate boundary (one-sided half-step at the edges)."""
    return np.stack([_central_1d(f, dx, -2), _central_1d(f, dy, -1)])


def div_central_array(p: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return _central_1d(p[0], dx, -2) + _central_1d(p[1], dy, -1)


def div_central_transpose(q: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Matrix transpose of :func:`div_central_array` (scalar -> vector)."""
    return np.stack([_central_1d_T(q, dx, -2), _central_1d_T(q, dy, -1)])


def grad(f: ScalarField) -> VectorField:
    g = grad_array(f.values, f.grid.dx, f.grid.dy)
    return VectorField(f.grid, g[0], g[1])


def div(p: VectorField) -> ScalarField:
    return ScalarField(p.grid, div_array(p.stack(), p.grid.dx, p.grid.dy))


def grad_central(f: ScalarField) -> VectorField:
    g = grad_central_array(f.values, f.grid.dx, f.grid.dy)
    return VectorField(f.grid, g[0], g[1])


def div_central(p: VectorField) -> ScalarField:
    return ScalarField(p.grid, div_central_array(p.stack(), p.grid.dx, p.grid.dy))


# ---------------------------------------------------------------------------
# bilinear sampling


class Sampler:
    """Bilinear interpolation at fixed fractional pixel indices.

    Points outside the hull of pixel centers get zero weight. One sampler
    serves the gather, its exact transpose, and the spatial gradient of the
    interpolant, so forward and reverse sweeps share the same stencil.
    """

    def __init__(self, fx: np.ndarray, fy: np.ndarray, shape: tuple[int, int]):
        nx, ny = shape
        self.shape = shape
        self.out_shape = np.shape(fx)
        fx = np.ravel(fx)
        fy = np.ravel(fy)
        inside = (fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1)
        i0 = np.clip(np.floor(np.where(inside, fx, 0.0)).astype(np.intp), 0, nx - 2)
        j0 = np.clip(np.floor(np.where(inside, fy, 0.0)).astype(np.intp), 0, ny - 2)
        wx = np.where(inside, fx - i0, 0.0)
        wy = np.where(inside, fy - j0, 0.0)
        self.inside = inside
        self.wx = wx
        self.wy = wy
        self.base = i0 * ny + j0
        self.ny = ny
        m = inside.astype(float)
        self.w00 = (1.0 - wx) * (1.0 - wy) * m
        self.w10 = wx * (1.0 - wy) * m
        self.w01 = (1.0 - wx) * wy * m
        self.w11 = wx * wy * m

    @classmethod
    def displaced(cls, grid: Grid, ux: np.ndarray, uy: np.ndarray, scale: float) -> "Sampler":
        """Sampler at pixel centers moved by ``scale * u`` (``u`` in world units).

        Indices are formed as ``i + scale*u/dx`` so a zero displacement lands
        exactly on the pixel centers.
        """
        ix = np.arange(grid.nx, dtype=float)[:, None]
        iy = np.arange(grid.ny, dtype=float)[None, :]
        return cls(ix + (scale / grid.dx) * ux, iy + (scale / grid.dy) * uy, grid.shape)

    def gather(self, f: np.ndarray) -> np.ndarray:
        flat = f.ravel()
        b = self.base
        out = (flat[b] * self.w00 + flat[b + self.ny] * self.w10
               + flat[b + 1] * self.w01 + flat[b + self.ny + 1] * self.w11)
        return out.reshape(self.out_shape)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`gather`."""
        v = np.ravel(values)
        b = self.base
        n = self.shape[0] * self.shape[1]
        idx = np.concatenate([b, b + self.ny, b + 1, b + self.ny + 1])
        wts = np.concatenate([v * self.w00, v * self.w10, v * self.w01, v * self.w11])
        return np.bincount(idx, weights=wts, minlength=n).reshape(self.shape)

    def gradient(self, f: np.ndarray, dx: float, dy: float) -> np.ndarray:
        """World-space gradient of the bilinear interpolant at the sample points."""
        flat = f.ravel()
        b = self.base
        f00, f10 = flat[b], flat[b + self.ny]
        f01, f11 = flat[b + 1], flat[b + self.ny + 1]
        m = self.inside.astype(float)
        gx = ((1.0 - self.wy) * (f10 - f00) + self.wy * (f11 - f01)) * m / dx
        gy = ((1.0 - self.wx) * (f01 - f00) + self.wx * (f11 - f10)) * m / dy
        return np.stack([gx.reshape(self.out_shape), gy.reshape(self.out_shape)])


def interp(f: ScalarField, pts) -> np.ndarray:
    """Bilinear interpolation of ``f`` at world points ``pts[..., 2]``; zero outside."""
    pts = np.asarray(pts, dtype=float)
    fx, fy = f.grid.to_index(pts[..., 0], pts[..., 1])
    return Sampler(fx, fy, f.grid.shape).gather(f.values)


# ---------------------------------------------------------------------------
# integrals


def inner(f: ScalarField, g: ScalarField) -> float:
    if f.grid != g.grid:
        raise ValueError("inner product of fields on different grids")
    return float(np.sum(f.values * g.values) * f.grid.cell_area)


def mass(f: ScalarField) -> float:
    return inner(f, ScalarField(f.grid, np.ones(f.grid.shape)))


def norm(f: ScalarField) -> float:
    return float(np.sqrt(inner(f, f)))
