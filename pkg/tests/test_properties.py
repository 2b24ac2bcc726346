"""Randomized invariants (hypothesis)."""

import math

import numpy as np
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from dotct import config as C
from dotct.bench import nrmse, ssim
from dotct.fields import (Sampler, ScalarField, TimeGrid, div_array, div_central_array,
                          div_central_transpose, grad_array, make_grid)
from dotct.flow import VelocityField, push_forward
from dotct.projector import add_noise_array, snr_db
from dotct.rkhs import make_kernel_op

FAST = settings(max_examples=25, deadline=None)
seeds = st.integers(0, 2 ** 31 - 1)
sizes = st.integers(3, 12)
spacing = st.floats(0.05, 3.0)


@FAST
@given(seeds, sizes, sizes, spacing, spacing)
def test_grad_div_are_negative_adjoints(seed, nx, ny, dx, dy):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((nx, ny))
    p = rng.standard_normal((2, nx, ny))
    lhs = np.sum(grad_array(f, dx, dy) * p)
    rhs = -np.sum(f * div_array(p, dx, dy))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs)) * nx * ny


@FAST
@given(seeds, sizes, sizes, spacing, spacing)
def test_central_divergence_transpose(seed, nx, ny, dx, dy):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((2, nx, ny))
    q = rng.standard_normal((nx, ny))
    lhs = np.sum(div_central_array(p, dx, dy) * q)
    rhs = np.sum(p * div_central_transpose(q, dx, dy))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs)) * nx * ny


@FAST
@given(seeds, sizes, sizes)
def test_scatter_transposes_gather(seed, nx, ny):
    rng = np.random.default_rng(seed)
    smp = Sampler(rng.uniform(-2, nx + 1, (5, 4)), rng.uniform(-2, ny + 1, (5, 4)), (nx, ny))
    f = rng.standard_normal((nx, ny))
    w = rng.standard_normal((5, 4))
    a, b = np.sum(smp.gather(f) * w), np.sum(f * smp.scatter(w))
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@FAST
@given(seeds, st.integers(-2, 2), st.integers(-2, 2), st.sampled_from([1, 2, 4]))
def test_integer_pixel_translation_is_exact_shift(seed, kx, ky, MN):
    grid = make_grid(32, 32, (0, 32, 0, 32))
    theta = np.zeros(grid.shape)
    theta[14:18, 14:18] = np.random.default_rng(seed).random((4, 4))
    # kx, ky pixels per step; the block stays inside the domain
    tg = TimeGrid(MN, 1)
    v = VelocityField.from_function(grid, tg, lambda t, x, y: (np.full_like(x, kx * MN),
                                                                np.full_like(y, ky * MN)))
    frames = push_forward(ScalarField(grid, theta), v)
    expect = np.roll(np.roll(theta, kx * MN, 0), ky * MN, 1)
    assert np.array_equal(frames.frame(MN).values, expect)


@FAST
@given(seeds, st.floats(0.0, 0.6))
def test_push_forward_stays_nonnegative(seed, amp):
    grid = make_grid(12, 12, (-1, 1, -1, 1))
    rng = np.random.default_rng(seed)
    tg = TimeGrid(2, 2)
    v = VelocityField(grid, tg, amp * rng.standard_normal((5, 2, 12, 12)))
    frames = push_forward(ScalarField(grid, rng.random(grid.shape)), v)
    assert (frames.data >= 0).all() and np.isfinite(frames.data).all()


@FAST
@given(seeds, st.floats(0.2, 2.0))
def test_kernel_is_symmetric_psd(seed, sigma):
    grid = make_grid(10, 10, (-2, 2, -2, 2))
    op = make_kernel_op(grid, sigma)
    rng = np.random.default_rng(seed)
    u, w = rng.standard_normal((2, 2, 10, 10))
    a, b = np.sum(op.apply_array(u) * w), np.sum(u * op.apply_array(w))
    scale = np.sum(np.abs(op.apply_array(u))) * np.sum(np.abs(w)) + 1.0
    assert abs(a - b) <= 1e-12 * scale
    assert np.sum(op.apply_array(u) * u) >= -1e-12 * scale


@FAST
@given(seeds, st.floats(-5.0, 40.0))
def test_noise_hits_requested_snr(seed, target):
    values = np.random.default_rng(seed).random((4, 9)) + 0.1
    noisy = add_noise_array(values, target, seed)
    assert math.isclose(snr_db(values, noisy), target, abs_tol=1e-9)


@FAST
@given(seeds, st.floats(0.1, 100.0))
def test_nrmse_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.random((12, 12)) + 0.1
    rec = gt + 0.1 * rng.standard_normal((12, 12))
    assert math.isclose(nrmse(c * rec, c * gt), nrmse(rec, gt), rel_tol=1e-12)


@FAST
@given(seeds)
def test_ssim_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 20, 20))
    s = ssim(a, b, data_range=1.0)
    assert -1.0 <= s <= 1.0
    assert math.isclose(s, ssim(b, a, data_range=1.0), abs_tol=1e-14)
    assert math.isclose(ssim(a, a, data_range=1.0), 1.0, abs_tol=1e-12)


@FAST
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1e-3), st.integers(0, 50), st.integers(1, 8),
       st.sampled_from(["template_first", "velocity_first"]), st.one_of(st.none(), st.floats(-10, 60)))
def test_config_roundtrip(mu1, mu2, K, M, order, snr):
    cfg = C.from_dict({"model": {"mu1": mu1, "mu2": mu2}, "solver": {"K": K, "order": order},
                       "time": {"M": M}, "noise": {"snr_db": snr}})
    assert C.from_dict(C.to_dict(cfg)) == cfg
    assert C.from_dict(yaml.safe_load(C.dumps(cfg))) == cfg
