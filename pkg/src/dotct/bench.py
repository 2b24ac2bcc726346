"""Phantoms under known mass-preserving motion, gated data simulation, and image metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import Grid, ScalarField, TimeGrid, mass
from .flow import VelocityField, push_forward
from .io import read_raw, write_field, write_raw
from .projector import Geometry, RayTransform, Sinogram, add_noise_array, gate_geometry, snr_db

# ---------------------------------------------------------------------------
# shapes


def _soft_step(d: np.ndarray, width: float) -> np.ndarray:
    """1 inside (d < 0), 0 outside, with a tanh edge of the given width."""
    return 0.5 * (1.0 - np.tanh(d / width))


@dataclass(frozen=True)
class StarObject:
    """Smooth-edged star: boundary radius ``r (1 + m cos(k phi + phase))``."""

    center: tuple[float, float]
    radius: float
    arms: int = 5
    modulation: float = 0.3
    phase: float = 0.0
    intensity: float = 1.0
    edge: float = 0.15

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.center[0], y - self.center[1]
        r = np.hypot(dx, dy)
        phi = np.arctan2(dy, dx)
        boundary = self.radius * (1.0 + self.modulation * np.cos(self.arms * phi + self.phase))
        return self.intensity * _soft_step(r - boundary, self.edge)

    @property
    def reach(self) -> float:
        return self.radius * (1.0 + abs(self.modulation)) + 6.0 * self.edge


@dataclass(frozen=True)
class HeartObject:
    """Crescent-shaped wall with two lobes, loosely resembling a heart slice."""

    center: tuple[float, float] = (0.0, 0.0)
    size: float = 2.0
    intensity: float = 1.0
    edge: float = 0.06

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        s = self.size
        u, w = (x - cx) / s, (y - cy) / s
        outer = _soft_step(np.hypot(u, w) - 1.0, self.edge / s)
        inner_ = _soft_step(np.hypot(u - 0.25, w + 0.1) - 0.7, self.edge / s)
        crescent = np.clip(outer - inner_, 0.0, None)
        lobe_a = 0.6 * _soft_step(np.hypot(u + 0.35, w - 0.85) - 0.35, self.edge / s)
        lobe_b = 0.6 * _soft_step(np.hypot(u - 0.45, w - 0.8) - 0.3, self.edge / s)
        return self.intensity * np.clip(crescent + lobe_a + lobe_b, 0.0, 1.0)

    @property
    def reach(self) -> float:
        return self.size * 1.25 + 6.0 * self.edge


@dataclass(frozen=True)
class Motion:
    """Per-gate affine motion about the object's center.

    From one gate to the next the object is translated by ``translation``,
    rotated by ``rotation`` radians and scaled by ``scale``; intensities are
    divided by the area change so mass is conserved.
    """

    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0

    def is_identity(self) -> bool:
        return self.translation == (0.0, 0.0) and self.rotation == 0.0 and self.scale == 1.0


@dataclass(frozen=True)
class Vortex:
    center: tuple[float, float]
    strength: float
    width: float


@dataclass(frozen=True)
class PhantomSpec:
    """Base phantom and its motion model.

    ``motion_kind="affine"`` pairs ``motions`` with ``objects`` (a single
    motion is shared by all). ``motion_kind="flow"`` pushes the base image
    along the stationary velocity generated by ``vortices``.
    """

    kind: str
    grid: Grid
    objects: tuple
    motions: tuple = (Motion(),)
    motion_kind: str = "affine"
    vortices: tuple = ()
    flow_steps: int = 8
    supersample: int = 3
    margin: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stars", "heart"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.motion_kind not in ("affine", "flow"):
            raise ValueError(f"unknown motion kind {self.motion_kind!r}")
        if len(self.motions) not in (1, len(self.objects)):
            raise ValueError("need one motion or one per object")
        if self.supersample < 1 or self.flow_steps < 1:
            raise ValueError("supersample and flow_steps must be >= 1")
        if self.kind == "stars":
            for o in self.objects:
                if not 0.0 <= o.intensity <= 1.0:
                    raise ValueError("star intensities must lie in [0, 1]")

    def motion_of(self, k: int) -> Motion:
        return self.motions[0] if len(self.motions) == 1 else self.motions[k]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "grid": {"nx": self.grid.nx, "ny": self.grid.ny,
                                         "extent": list(self.grid.extent)},
             "objects": [asdict(o) for o in self.objects],
             "motions": [asdict(m) for m in self.motions],
             "motion_kind": self.motion_kind, "vortices": [asdict(v) for v in self.vortices],
             "flow_steps": self.flow_steps, "supersample": self.supersample,
             "margin": self.margin, "seed": self.seed}
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        obj_cls = StarObject if d["kind"] == "stars" else HeartObject
        objects = tuple(obj_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                        for o in d["objects"])
        motions = tuple(Motion(tuple(m["translation"]), m["rotation"], m["scale"]) for m in d["motions"])
        vortices = tuple(Vortex(tuple(v["center"]), v["strength"], v["width"]) for v in d["vortices"])
        g = d["grid"]
        return cls(d["kind"], Grid(g["nx"], g["ny"], tuple(g["extent"])), objects, motions,
                   d["motion_kind"], vortices, d["flow_steps"], d["supersample"], d["margin"], d["seed"])


def stars_spec(grid: Grid | None = None, seed: int = 0, shift: float = 0.6,
               rotation_deg: float = 4.0, scale: float = 1.02) -> PhantomSpec:
    """Six star objects with seeded shapes and per-object motions of the given magnitudes.

    Defaults target a 128x128 grid on ``[-16, 16]^2``.
    """
    grid = grid or Grid(128, 128, (-16.0, 16.0, -16.0, 16.0))
    rng = np.random.default_rng(seed)
    half = min(grid.extent[1] - grid.extent[0], grid.extent[3] - grid.extent[2]) / 2
    ring = 0.45 * half
    objects, motions = [], []
    for k in range(6):
        ang = 2 * math.pi * k / 6 + rng.uniform(-0.15, 0.15)
        c = (ring * math.cos(ang), ring * math.sin(ang))
        objects.append(StarObject(
            center=(round(c[0], 6), round(c[1], 6)),
            radius=round(float(rng.uniform(0.08, 0.12) * half), 6),
            arms=int(rng.integers(4, 7)),
            modulation=round(float(rng.uniform(0.2, 0.35)), 6),
            phase=round(float(rng.uniform(0, 2 * math.pi)), 6),
            intensity=round(float(rng.uniform(0.5, 1.0)), 6),
        ))
        d = rng.uniform(0, 2 * math.pi)
        motions.append(Motion(
            translation=(round(shift * math.cos(d), 6), round(shift * math.sin(d), 6)),
            rotation=round(math.radians(rotation_deg) * float(rng.choice([-1.0, 1.0])), 9),
            scale=float(scale if k % 2 == 0 else 1.0 / scale),
        ))
    return PhantomSpec("stars", grid, tuple(objects), tuple(motions), seed=seed)


def heart_spec(grid: Grid | None = None, seed: int = 0, shift: float = 0.12,
               rotation_deg: float = 3.0, scale: float = 1.04) -> PhantomSpec:
    """Heart-like object on ``[-4.5, 4.5]^2`` (120x120 by default) with one global motion."""
    grid = grid or Grid(120, 120, (-4.5, 4.5, -4.5, 4.5))
    return PhantomSpec("heart", grid, (HeartObject((0.0, -0.2), 2.0, 1.0),),
                       (Motion((shift, 0.5 * shift), math.radians(rotation_deg), scale),), seed=seed)


# ---------------------------------------------------------------------------
# gate sequences


def _pixel_samples(grid: Grid, ss: int) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of ``ss x ss`` sub-samples per pixel, shape ``(nx, ny, ss*ss)``."""
    off = (np.arange(ss) + 0.5) / ss - 0.5
    ox, oy = np.meshgrid(off * grid.dx, off * grid.dy, indexing="ij")
    X, Y = grid.meshgrid()
    return X[..., None] + ox.ravel(), Y[..., None] + oy.ravel()


def _warp_inverse(x, y, center, motion: Motion, n: int):
    """Pre-image of ``(x, y)`` under ``n`` applications of ``motion`` about ``center``."""
    tx, ty = motion.translation
    s = motion.scale ** n
    a = -motion.rotation * n
    u = x - center[0] - n * tx
    w = y - center[1] - n * ty
    ca, sa = math.cos(a), math.sin(a)
    return center[0] + (ca * u - sa * w) / s, center[1] + (sa * u + ca * w) / s


def _check_support(spec: PhantomSpec, N: int):
    x0, x1, y0, y1 = spec.grid.extent
    for k, o in enumerate(spec.objects):
        m = spec.motion_of(k)
        for n in range(N):
            cx = o.center[0] + n * m.translation[0]
            cy = o.center[1] + n * m.translation[1]
            r = o.reach * max(m.scale ** n, 1.0)
            if (cx - r < x0 + spec.margin or cx + r > x1 - spec.margin
                    or cy - r < y0 + spec.margin or cy + r > y1 - spec.margin):
                raise ValueError(f"object {k} leaves the interior of the domain at gate {n + 1}")


def _flow_velocity(spec: PhantomSpec, tg: TimeGrid) -> VelocityField:
    def field_(t, X, Y):
        ux = np.zeros_like(X)
        uy = np.zeros_like(X)
        for vt in spec.vortices:
            dx, dy = X - vt.center[0], Y - vt.center[1]
            g = vt.strength * np.exp(-(dx ** 2 + dy ** 2) / (2 * vt.width ** 2))
            ux -= g * dy
            uy += g * dx
        return ux, uy
    return VelocityField.from_function(spec.grid, tg, field_)


def make_phantom_sequence(spec: PhantomSpec, N: int) -> list[ScalarField]:
    """Ground-truth images for gates ``1..N``; gate 1 is the base phantom."""
    if N < 1:
        raise ValueError("need at least one gate")
    grid = spec.grid
    if spec.motion_kind == "flow":
        base = make_phantom_sequence(PhantomSpec(spec.kind, grid, spec.objects, (Motion(),),
                                                 supersample=spec.supersample,
                                                 margin=spec.margin, seed=spec.seed), 1)[0]
        if N == 1:
            return [base]
        # gate 1 sits at t = 0 here, so N - 1 intervals
        tg = TimeGrid(N - 1, spec.flow_steps)
        frames = push_forward(base, _flow_velocity(spec, tg))
        return [base] + [frames.gate(i) for i in range(1, N)]
    _check_support(spec, N)
    X, Y = _pixel_samples(grid, spec.supersample)
    out = []
    for n in range(N):
        img = np.zeros(X.shape)
        for k, o in enumerate(spec.objects):
            m = spec.motion_of(k)
            if n == 0 or m.is_identity():
                img += o.evaluate(X, Y)
            else:
                u, w = _warp_inverse(X, Y, o.center, m, n)
                img += o.evaluate(u, w) / m.scale ** (2 * n)
        out.append(ScalarField(grid, img.mean(axis=-1)))
    return out


# ---------------------------------------------------------------------------
# acquisition


@dataclass(frozen=True)
class GeometryPlan:
    num_views: int
    num_bins: int
    det_extent: tuple[float, float]
    offset_step: float
    include_endpoint: bool = False

    def geometry(self, i: int) -> Geometry:
        return gate_geometry(i, self.num_views, self.num_bins, self.det_extent,
                             self.offset_step, self.include_endpoint)


@dataclass(frozen=True)
class Dataset:
    grid: Grid
    geometries: tuple
    clean: tuple
    noisy: tuple
    snr_achieved: tuple
    ground_truth: tuple
    provenance: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.geometries)

    def gates(self) -> list[tuple[Geometry, Sinogram]]:
        return [(g, s) for g, s in zip(self.geometries, self.noisy)]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(self.N):
            tag = f"gate{i + 1:02d}"
            write_raw(d / f"{tag}_clean.raw", self.clean[i].values)
            write_raw(d / f"{tag}_noisy.raw", self.noisy[i].values)
            write_field(d / f"{tag}_truth.raw", self.ground_truth[i])
            snr = self.snr_achieved[i]
            geo = self.geometries[i]
            entries.append({"geometry": None if geo is None else geo.to_dict(),
                            "snr_db": None if math.isinf(snr) else snr,
                            "clean": f"{tag}_clean.raw", "noisy": f"{tag}_noisy.raw",
                            "truth": f"{tag}_truth.raw"})
        manifest = {"grid": {"nx": self.grid.nx, "ny": self.grid.ny, "extent": list(self.grid.extent)},
                    "gates": entries, "provenance": self.provenance}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        path = d / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest in {d}")
        m = json.loads(path.read_text())
        grid = Grid(m["grid"]["nx"], m["grid"]["ny"], tuple(m["grid"]["extent"]))
        geoms, clean, noisy, truth, snrs = [], [], [], [], []
        for e in m["gates"]:
            geo = None if e["geometry"] is None else Geometry.from_dict(e["geometry"])
            geoms.append(geo)
            clean.append(_wrap(grid, geo, read_raw(d / e["clean"])[0]))
            noisy.append(_wrap(grid, geo, read_raw(d / e["noisy"])[0]))
            truth.append(ScalarField(grid, read_raw(d / e["truth"])[0]))
            snrs.append(math.inf if e["snr_db"] is None else float(e["snr_db"]))
        return cls(grid, tuple(geoms), tuple(clean), tuple(noisy), tuple(snrs), tuple(truth),
                   m.get("provenance", {}))


def _wrap(grid: Grid, geo: Geometry | None, values: np.ndarray):
    return ScalarField(grid, values) if geo is None else Sinogram(geo, values)


def simulate(seq: list[ScalarField], plan: GeometryPlan | None, snr: float = math.inf, seed: int = 0,
             provenance: dict | None = None) -> Dataset:
    """Measure each gate image; gate ``i`` draws noise with seed ``seed + i``.

    With ``plan=None`` the measurement is the image itself (identity forward
    operator, as used for sequential registration).
    """
    if not seq:
        raise ValueError("empty gate sequence")
    grid = seq[0].grid
    if any(f.grid != grid for f in seq):
        raise ValueError("gate images live on different grids")
    geoms, clean, noisy, achieved = [], [], [], []
    for i, f in enumerate(seq, start=1):
        geo = None if plan is None else plan.geometry(i)
        c = f.values if geo is None else RayTransform(grid, geo).apply(f.values)
        n = add_noise_array(c, snr, seed + i)
        geoms.append(geo)
        clean.append(_wrap(grid, geo, c))
        noisy.append(_wrap(grid, geo, n))
        achieved.append(snr_db(c, n))
    prov = {"seed": seed, "snr_db": None if math.isinf(snr) else snr,
            "gate_seeds": [seed + i for i in range(1, len(seq) + 1)], **(provenance or {})}
    return Dataset(grid, tuple(geoms), tuple(clean), tuple(noisy), tuple(achieved), tuple(seq), prov)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    ssim: float
    psnr: float
    nrmse: float
    mass_rec: float
    mass_gt: float

    def as_dict(self) -> dict:
        return asdict(self)


def ssim(rec: np.ndarray, gt: np.ndarray, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), borders of 5 px excluded."""
    x = np.asarray(rec, dtype=float)
    y = np.asarray(gt, dtype=float)
    if data_range is None:
        data_range = float(y.max() - y.min())
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(a):
        return gaussian_filter(a, sigma=1.5, truncate=3.5, mode="reflect")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(s[5:-5, 5:-5].mean())


def psnr(rec: np.ndarray, gt: np.ndarray) -> float:
    err = float(np.mean((np.asarray(rec) - np.asarray(gt)) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.max(gt)) ** 2 / err)


def nrmse(rec: np.ndarray, gt: np.ndarray) -> float:
    den = float(np.linalg.norm(gt))
    if den == 0.0:
        raise ValueError("NRMSE undefined for an all-zero reference")
    return float(np.linalg.norm(np.asarray(rec) - np.asarray(gt))) / den


def metrics(rec: ScalarField, gt: ScalarField) -> Metrics:
    if rec.grid != gt.grid:
        raise ValueError("metrics need both images on one grid")
    return Metrics(ssim(rec.values, gt.values), psnr(rec.values, gt.values),
                   nrmse(rec.values, gt.values), mass(rec), mass(gt))


def relative_mass_error(f: ScalarField, ref: ScalarField) -> float:
    return abs(mass(f) - mass(ref)) / abs(mass(ref))


__all__ = ["StarObject", "HeartObject", "Motion", "Vortex", "PhantomSpec", "stars_spec", "heart_spec",
           "make_phantom_sequence", "GeometryPlan", "Dataset", "simulate", "Metrics", "ssim", "psnr",
           "nrmse", "metrics", "relative_mass_error"]
