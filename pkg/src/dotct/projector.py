"""Parallel-beam Radon transform, its exact discrete adjoint, and noise simulation.

The ray for view angle ``phi`` and detector coordinate ``s`` is
``s * (cos phi, sin phi) + t * (-sin phi, cos phi)``. Line integrals are
sampled at step ``min(dx, dy) / 2`` through bilinear interpolation, and the
whole discretization is stored as one sparse matrix so that the adjoint is
its transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .fields import Grid, Sampler, ScalarField


@dataclass(frozen=True)
class Geometry:
    angles: tuple[float, ...]
    num_bins: int
    det_extent: tuple[float, float]

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        if not angles:
            raise ValueError("geometry needs at least one view")
        if not np.isfinite(angles).all():
            raise ValueError("non-finite view angle")
        if int(self.num_bins) < 1:
            raise ValueError("num_bins must be >= 1")
        s0, s1 = (float(s) for s in self.det_extent)
        if not s1 > s0:
            raise ValueError(f"degenerate detector extent {self.det_extent}")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "num_bins", int(self.num_bins))
        object.__setattr__(self, "det_extent", (s0, s1))

    @property
    def num_views(self) -> int:
        return len(self.angles)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_bins)

    @property
    def bin_width(self) -> float:
        return (self.det_extent[1] - self.det_extent[0]) / self.num_bins

    @property
    def bins(self) -> np.ndarray:
        return self.det_extent[0] + (np.arange(self.num_bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return {"angles": list(self.angles), "num_bins": self.num_bins,
                "det_extent": list(self.det_extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(tuple(d["angles"]), d["num_bins"], tuple(d["det_extent"]))


@dataclass(frozen=True)
class Sinogram:
    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.geometry.shape:
            raise ValueError(f"sinogram shape {vals.shape} != geometry {self.geometry.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("sinogram has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def gate_geometry(i: int, num_views: int, num_bins: int, det_extent, offset_step: float,
                  include_endpoint: bool = False) -> Geometry:
    """Views for gate ``i`` (1-based): ``(i-1)*offset_step + k*pi/num_views``.

    With ``include_endpoint`` the views span the closed interval
    ``[(i-1)*offset, (i-1)*offset + pi]`` instead.
    """
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    if i < 1:
        raise ValueError("gate index is 1-based")
    start = (i - 1) * offset_step
    if include_endpoint and num_views > 1:
        angles = start + np.arange(num_views) * math.pi / (num_views - 1)
    else:
        angles = start + np.arange(num_views) * math.pi / num_views
    return Geometry(tuple(angles), num_bins, tuple(det_extent))


@lru_cache(maxsize=64)
def _system_matrix(grid: Grid, geom: Geometry) -> sp.csr_matrix:
    step = 0.5 * min(grid.dx, grid.dy)
    x0, x1, y0, y1 = grid.extent
    reach = max(math.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
    half = int(math.ceil(reach / step))
    t = np.arange(-half, half + 1) * step
    s = geom.bins
    nb = geom.num_bins
    rows, cols, data = [], [], []
    for v, phi in enumerate(geom.angles):
        c, si = math.cos(phi), math.sin(phi)
        px = s[:, None] * c - t[None, :] * si
        py = s[:, None] * si + t[None, :] * c
        fx, fy = grid.to_index(px, py)
        smp = Sampler(fx, fy, grid.shape)
        keep = smp.inside
        ray = np.broadcast_to((v * nb + np.arange(nb))[:, None], px.shape).ravel()[keep]
        base = smp.base[keep]
        for off, w in ((0, smp.w00), (grid.ny, smp.w10), (1, smp.w01), (grid.ny + 1, smp.w11)):
            rows.append(ray)
            cols.append(base + off)
            data.append(w[keep] * step)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    nz = data != 0.0
    A = sp.coo_matrix((data[nz], (rows[nz], cols[nz])),
                      shape=(geom.num_views * nb, grid.nx * grid.ny))
    A = A.tocsr()
    A.sum_duplicates()
    return A


class RayTransform:
    """Discretized Radon transform on ``grid`` for one gate geometry.

    ``inner_weight`` is the data-space quadrature weight (bin width), so
    ``<A f, g>_data == <f, A* g>_image`` with the image side weighted by the
    cell area.
    """

    def __init__(self, grid: Grid, geometry: Geometry):
        self.grid = grid
        self.geometry = geometry
        self.matrix = _system_matrix(grid, geometry)
        self.matrix_T = self.matrix.T.tocsr()
        self.inner_weight = geometry.bin_width
        self._adj_scale = geometry.bin_width / grid.cell_area
        self.data_shape = geometry.shape

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix @ f.ravel()).reshape(self.data_shape)

    def adjoint_apply(self, g: np.ndarray) -> np.ndarray:
        return (self.matrix_T @ g.ravel()).reshape(self.grid.shape) * self._adj_scale


class IdentityTransform:
    """Identity forward operator: the data are images on the reconstruction grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.geometry = None
        self.inner_weight = grid.cell_area
        self.data_shape = grid.shape

    def apply(self, f: np.ndarray) -> np.ndarray:
        return f

    def adjoint_apply(self, g: np.ndarray) -> np.ndarray:
        return g


def forward(f: ScalarField, geom: Geometry) -> Sinogram:
    return Sinogram(geom, RayTransform(f.grid, geom).apply(f.values))


def adjoint(g: Sinogram, geom: Geometry, grid: Grid) -> ScalarField:
    if g.geometry != geom:
        raise ValueError("sinogram geometry does not match the requested geometry")
    return ScalarField(grid, RayTransform(grid, geom).adjoint_apply(g.values))


def data_inner(g: Sinogram, h: Sinogram) -> float:
    if g.geometry != h.geometry:
        raise ValueError("sinograms on different geometries")
    return float(np.sum(g.values * h.values) * g.geometry.bin_width)


def snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = np.asarray(noisy) - np.asarray(clean)
    en = float(np.sum(noise ** 2))
    if en == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(np.asarray(clean) ** 2)) / en)


def add_noise_array(values: np.ndarray, snr: float, seed: int) -> np.ndarray:
    """White Gaussian noise scaled so the realized SNR equals ``snr`` dB."""
    values = np.asarray(values, dtype=float)
    if math.isinf(snr) and snr > 0:
        return values
    signal = float(np.sum(values ** 2))
    if signal == 0.0:
        raise ValueError("cannot reach a finite SNR on an all-zero signal")
    n = np.random.default_rng(seed).standard_normal(values.shape)
    n *= math.sqrt(signal / (float(np.sum(n ** 2)) * 10.0 ** (snr / 10.0)))
    return values + n


def add_noise(g: Sinogram, snr: float, seed: int) -> Sinogram:
    """Additive white Gaussian noise scaled to hit ``snr`` dB exactly on the draw."""
    if math.isinf(snr) and snr > 0:
        return g
    return Sinogram(g.geometry, add_noise_array(g.values, snr, seed))
