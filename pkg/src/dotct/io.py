"""Raw float dumps with JSON sidecars, and 16-bit PNG export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .fields import Grid, ScalarField


def write_raw(path, values: np.ndarray, **meta) -> Path:
    """Write ``values`` as little-endian float64, row-major, plus ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype="<f8")
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"dtype": "<f8", "order": "C", "shape": list(arr.shape), **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=meta.get("dtype", "<f8"))
    return arr.reshape(meta["shape"]).astype(float), meta


def write_field(path, f: ScalarField) -> Path:
    g = f.grid
    return write_raw(path, f.values, kind="scalar_field", nx=g.nx, ny=g.ny, extent=list(g.extent))


def read_field(path) -> ScalarField:
    arr, meta = read_raw(path)
    return ScalarField(Grid(meta["nx"], meta["ny"], tuple(meta["extent"])), arr)


def write_png(path, values: np.ndarray, window: tuple[float, float] | None = None) -> tuple[float, float]:
    """16-bit grayscale PNG with a linear window; x runs left-right, y bottom-up.

    The window is written to ``<path>.json`` and returned.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if window is None:
        window = (0.0, float(np.max(values)))
    lo, hi = float(window[0]), float(window[1])
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip((np.asarray(values, dtype=float) - lo) * scale, 0, 65535)
    img = np.round(img).astype(np.uint16)[:, ::-1].T
    Image.fromarray(np.ascontiguousarray(img)).save(path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps({"window": [lo, hi]}))
    return (lo, hi)
