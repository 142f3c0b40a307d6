import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roughlab.errors import DomainError
from roughlab.fbm_noise import fbm_chen_tolerance, lift_fbm, sample_fbm
from roughlab.rough_core import (ControlledPath, Grid, Path, RoughPath, area_norm, c_gamma_norm,
                                 chen_defect, chen_tolerance, controlled_norm, holder_seminorm,
                                 increment, lift_smooth, read_roughpath, remainder, remainder_norm,
                                 rough_distance, symmetry_defect, translate, variation_holder_norm,
                                 write_roughpath)

G = Grid(0.0, 1.0, 65)


def linear(grid=G):
    return Path(grid, grid.times[:, None])


def random_walk(seed, n=65, d=2):
    rng = np.random.default_rng(seed)
    return Path(Grid(0.0, 1.0, n), np.cumsum(rng.normal(size=(n, d)), axis=0) / np.sqrt(n))


# ---------------------------------------------------------------- grid

def test_grid_rejects_bad_input():
    with pytest.raises(DomainError):
        Grid(0.0, 1.0, 1)
    with pytest.raises(DomainError):
        Grid(1.0, 0.0, 5)


def test_grid_index_and_refine():
    assert G.index(0.5) == 32
    assert G.refine(2).n_points == 257
    with pytest.raises(IndexError):
        G.index(0.51)


# ---------------------------------------------------------------- increment

def test_increment_examples():
    assert np.allclose(increment(Path(G, np.full((65, 1), 7.0)), 3, 40), 0)
    assert increment(linear(), 0, 32)[0] == pytest.approx(0.5)
    with pytest.raises(IndexError):
        increment(linear(), 0, 65)


@given(st.integers(0, 64), st.integers(0, 64), st.integers(0, 64), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_increment_telescopes(s, t, u, seed):
    p = random_walk(seed)
    assert np.allclose(increment(p, s, t) + increment(p, t, u), increment(p, s, u), atol=1e-14)
    assert np.allclose(increment(p, s, t), -increment(p, t, s))


# ---------------------------------------------------------------- Hoelder norms

def test_holder_examples():
    assert holder_seminorm(linear(), 0.5) == pytest.approx(1.0)
    assert holder_seminorm(Path(G, np.ones((65, 1))), 0.5) == 0.0
    assert holder_seminorm(Path(G, np.sqrt(G.times)[:, None]), 0.5) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DomainError):
        holder_seminorm(linear(), 1.5)


def test_holder_grows_under_refinement():
    f = lambda t: np.sin(7 * t) + np.abs(t - 0.3) ** 0.4
    vals = []
    for n in (17, 33, 65, 129):
        g = Grid(0.0, 1.0, n)
        vals.append(holder_seminorm(Path(g, f(g.times)[:, None]), 0.4))
    assert np.all(np.diff(vals) >= -1e-14)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_c_gamma_triangle(seed):
    f, g = random_walk(seed), random_walk(seed + 1)
    assert c_gamma_norm(f + g, 0.4) <= c_gamma_norm(f, 0.4) + c_gamma_norm(g, 0.4) + 1e-12


# ---------------------------------------------------------------- areas and Chen

def test_area_norm_linear():
    rp = lift_smooth(linear())
    assert area_norm(rp, 1.0) == pytest.approx(0.5)
    zero = RoughPath(G, np.zeros((65, 1)), np.zeros((64, 1, 1)), 0.4)
    assert area_norm(zero, 0.8) == 0.0


def test_lift_smooth_linear_closed_form():
    rp = lift_smooth(linear())
    a = rp.area_matrix()[..., 0, 0]
    t = G.times
    expect = 0.5 * np.clip(t[None, :] - t[:, None], 0, None) ** 2
    iu = np.triu_indices(65)
    assert np.allclose(a[iu], expect[iu], atol=1e-15)


def test_area_norm_matches_independent_scan():
    rp = lift_fbm(sample_fbm(0.4, Grid(0, 1, 33), 5, dim=2), 2)
    full = rp.area_matrix()
    t = rp.grid.times
    best = 0.0
    for i in range(33):
        for j in range(i + 1, 33):
            best = max(best, np.linalg.norm(full[i, j]) / (t[j] - t[i]) ** 0.7)
    assert area_norm(rp, 0.7) == pytest.approx(best, rel=1e-12)


def test_circle_levy_area_against_riemann_sum():
    g = Grid(0.0, np.pi, 2001)
    x = np.column_stack([np.cos(g.times), np.sin(g.times)])
    rp = lift_smooth(Path(g, x))
    a = rp.area(0, 2000)
    anti = 0.5 * (a[0, 1] - a[1, 0])
    # left-point Riemann sums along the piecewise-linear path at 100x resolution
    lam = np.linspace(0.0, 1.0, 101)[:-1]
    fine = (x[:-1, None, :] + lam[None, :, None] * np.diff(x, axis=0)[:, None, :]).reshape(-1, 2)
    fine = np.vstack([fine, x[-1]])
    rel = fine[:-1] - fine[0]
    dx = np.diff(fine, axis=0)
    ref = 0.5 * (np.sum(rel[:, 0] * dx[:, 1]) - np.sum(rel[:, 1] * dx[:, 0]))
    assert abs(anti - ref) < 1e-8
    # continuous half-circle value
    assert abs(anti - np.pi / 2) < 1e-6


@given(st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_exact_lifts_satisfy_chen_and_geometry(seed):
    rp = lift_smooth(random_walk(seed, n=41, d=3))
    assert chen_defect(rp) <= 1e-12
    assert symmetry_defect(rp) <= 1e-12
    assert np.allclose(rp.area(7, 7), 0)


def test_chen_detects_perturbation():
    rp = lift_smooth(random_walk(1, n=21)).with_explicit_area()
    pa = rp.pair_area.copy()
    pa[3, 10, 0, 1] += 1e-3
    bad = RoughPath(rp.grid, rp.values, rp.step_area, rp.gamma, pair_area=pa)
    assert chen_defect(bad) >= 1e-3 - 1e-12


def test_fbm_lift_chen_within_tolerance():
    for seed in range(5):
        rp = lift_fbm(sample_fbm(0.4, Grid(0, 1, 129), seed, dim=2), 3)
        assert chen_defect(rp) <= fbm_chen_tolerance(rp, 3)


# ---------------------------------------------------------------- controlled paths

def test_remainder_examples():
    rp = lift_smooth(random_walk(3, d=2))
    n = rp.grid.n_points
    z = ControlledPath(rp, rp.values, np.broadcast_to(np.eye(2), (n, 2, 2)))
    assert np.abs(remainder(z)).max() < 1e-14
    const = ControlledPath(rp, np.ones((n, 1)), np.zeros((n, 1, 2)))
    assert np.abs(remainder(const)).max() == 0
    x = random_walk(4, d=1)
    rx = lift_smooth(x)
    sq = ControlledPath(rx, x.values ** 2, 2 * x.values[:, :, None])
    r = remainder(sq)[..., 0]
    dx = x.values[None, :, 0] - x.values[:, None, 0]
    iu = np.triu_indices(n, 1)
    assert np.allclose(r[iu], dx[iu] ** 2, atol=1e-13)


def test_remainder_grid_mismatch():
    rp = lift_smooth(random_walk(3, d=1))
    with pytest.raises(DomainError):
        ControlledPath(rp, np.zeros((10, 1)), np.zeros((10, 1, 1)))


def test_controlled_norm_examples():
    rp = lift_smooth(random_walk(3, d=2))
    n = rp.grid.n_points
    assert controlled_norm(ControlledPath(rp, np.zeros((n, 2)), np.zeros((n, 2, 2))), 0.4) == 0
    x0 = rp.values - rp.values[0]
    rp0 = rp.with_values(values=x0)
    z = ControlledPath(rp0, x0, np.broadcast_to(np.eye(2), (n, 2, 2)))
    assert controlled_norm(z, 0.4) == pytest.approx(np.sqrt(2), abs=1e-12)


def test_controlled_norm_is_sum_of_pieces():
    rp = lift_fbm(sample_fbm(0.4, Grid(0, 1, 33), 2, dim=2), 1)
    rng = np.random.default_rng(0)
    n = 33
    zp = rng.normal(size=(n, 1, 2))
    z = ControlledPath(rp, rng.normal(size=(n, 1)), zp)
    t = rp.grid.times
    sup_zp = max(np.linalg.norm(zp[i]) for i in range(n))
    hol = max(np.linalg.norm(zp[j] - zp[i]) / (t[j] - t[i]) ** 0.4
              for i in range(n) for j in range(i + 1, n))
    R = remainder(z)
    rem = max(np.linalg.norm(R[i, j]) / (t[j] - t[i]) ** 0.8 for i in range(n) for j in range(i + 1, n))
    expect = np.linalg.norm(z.z_values[0]) + sup_zp + hol + rem
    assert controlled_norm(z, 0.4) == pytest.approx(expect, rel=1e-12)
    assert remainder_norm(z, 0.8) == pytest.approx(rem, rel=1e-12)


# ---------------------------------------------------------------- translation

def test_translate_examples():
    rp = lift_fbm(sample_fbm(0.4, Grid(0, 1, 65), 1, dim=2), 2)
    same = translate(rp, np.zeros((65, 2)))
    assert np.array_equal(same.values, rp.values)
    assert np.array_equal(same.step_area, rp.step_area)
    h = np.column_stack([np.sin(3 * G.times), G.times ** 2])
    zero = RoughPath(G, np.zeros((65, 2)), np.zeros((64, 2, 2)), 0.4)
    assert np.allclose(translate(zero, h).step_area, lift_smooth(Path(G, h)).step_area, atol=1e-16)
    back = translate(translate(rp, h), -h)
    assert np.abs(back.values - rp.values).max() < 1e-10
    assert np.abs(back.step_area - rp.step_area).max() < 1e-10
    y = translate(rp, h)
    assert chen_defect(y) <= fbm_chen_tolerance(y, 2)
    assert symmetry_defect(y) <= 1e-10
    assert holder_seminorm(Path(G, y.values - rp.values), 0.4) <= variation_holder_norm(Path(G, h), 0.4) + 1e-12


def test_translate_lipschitz_ratio_is_stable():
    ratios = []
    for seed in range(10):
        a = lift_fbm(sample_fbm(0.4, G, seed, dim=2), 1, gamma=0.35)
        b = lift_fbm(sample_fbm(0.4, G, seed + 100, dim=2), 1, gamma=0.35)
        h = np.column_stack([np.cos(2 * G.times + seed), G.times])
        num = rough_distance(translate(a, h), translate(b, h))
        den = (1 + variation_holder_norm(Path(G, h), 0.35)) * rough_distance(a, b)
        ratios.append(num / den)
    assert np.all(np.isfinite(ratios))
    assert max(ratios) < 10


def test_translate_grid_mismatch():
    rp = lift_smooth(linear())
    with pytest.raises(DomainError):
        translate(rp, np.zeros((10, 1)))


# ---------------------------------------------------------------- text format

def test_roughpath_text_roundtrip():
    rp = lift_fbm(sample_fbm(0.4, Grid(0, 1, 17), 3, dim=2), 2)
    buf = io.StringIO()
    write_roughpath(rp, buf)
    assert buf.getvalue().startswith("# roughpath d=2 n=17 gamma=")
    back = read_roughpath(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.values, rp.values)
    assert np.array_equal(back.step_area, rp.step_area)
    assert back.gamma == rp.gamma


def test_roughpath_text_rejects_garbage():
    with pytest.raises(DomainError):
        read_roughpath(io.StringIO("nonsense\n"))
    with pytest.raises(DomainError):
        read_roughpath(io.StringIO("# roughpath d=1 n=3 gamma=0.4\n0 0\n"))


def test_chen_tolerance_is_small_for_unit_paths():
    assert chen_tolerance(lift_smooth(linear())) == pytest.approx(1e-12)
