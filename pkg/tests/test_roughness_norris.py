import math
import warnings

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from roughlab.errors import DomainError, HypothesisViolation, UndefinedBoundError
from roughlab.fbm_noise import lift_fbm, sample_fbm
from roughlab.lab import norris_instance, derivative_instance
from roughlab.rde_flow import rough_integral
from roughlab.rough_core import ControlledPath, Grid, Path, lift_smooth, remainder_norm, sup_norm
from roughlab.roughness_norris import (NORRIS_Q, RoughnessReport, brute_roughness, choose_beta, constant,
                                       default_n_max, directions, discrete_roughness, drift_integral,
                                       gubinelli_derivative_bound, interpolation_derivative,
                                       interpolation_sup_l2, l2_norm, load_constants, norris_bound,
                                       norris_exponent, derivative_bound_ratio, sharp_exponent,
                                       roughness_tail_study, tail_table)

G = Grid(0, 1, 257)


def fbm(seed, dim=1, n=257, hurst=0.4):
    return sample_fbm(hurst, Grid(0, 1, n), seed, dim=dim)


# ---------------------------------------------------------------- discrete roughness

def test_constant_and_linear_examples():
    assert discrete_roughness(Path(G, np.full((257, 1), 3.0)), 0.45).d_theta == 0
    for n_max in (1, 3, 5):
        rep = discrete_roughness(Path(G, G.times[:, None]), 1.0, n_max=n_max)
        assert rep.d_theta == pytest.approx(1.0, abs=1e-12)


def test_report_lower_bound_relation():
    rep = discrete_roughness(fbm(1, 2), 0.45)
    assert rep.l_theta_lower == rep.d_theta / (2 * 8 ** 0.45)
    assert set(rep.to_dict()) >= {"theta", "d_theta", "l_theta_lower", "argmin", "n_max", "sphere_resolution"}
    lvl, k, phi = rep.argmin
    assert 1 <= lvl <= rep.n_max and np.linalg.norm(phi) == pytest.approx(1.0)


def test_bad_inputs():
    with pytest.raises(DomainError):
        discrete_roughness(fbm(1), 0.0)
    with pytest.raises(DomainError):
        discrete_roughness(Path(Grid(0, 1, 101), np.zeros((101, 1))), 0.45, n_max=3)


def test_default_n_max():
    assert default_n_max(257) == 5
    assert default_n_max(1025) == 7
    assert default_n_max(97) == 3        # 96 = 2^5 * 3 but log2(96) - 3 = 3


@pytest.mark.parametrize("seed", range(5))
def test_one_dimensional_matches_two_direction_scan(seed):
    p = fbm(seed)
    rep = discrete_roughness(p, 0.45)
    assert rep.d_theta == brute_roughness(p, 0.45, rep.n_max, np.array([[1.0], [-1.0]]))


@pytest.mark.parametrize("dim,res", [(2, 360), (3, 2000)])
def test_matches_denser_sphere(dim, res):
    for seed in range(3):
        p = fbm(seed, dim)
        rep = discrete_roughness(p, 0.45)
        dense = brute_roughness(p, 0.45, rep.n_max, directions(dim, 10 * res))
        assert abs(rep.d_theta - dense) <= 0.02 * dense


def test_positive_on_fbm_seeds():
    vals = [discrete_roughness(fbm(s, 2), 0.45).d_theta for s in range(100)]
    assert min(vals) > 0


def test_monotone_in_n_max():
    p = fbm(4, 2)
    vals = [discrete_roughness(p, 0.45, n_max=k).d_theta for k in range(1, 6)]
    assert np.all(np.diff(vals) <= 1e-12)


def test_invariances():
    p = fbm(7, 2)
    base = discrete_roughness(p, 0.45).d_theta
    shifted = discrete_roughness(Path(G, p.values + [3.0, -1.0]), 0.45).d_theta
    assert shifted == pytest.approx(base, rel=1e-12)
    scaled = discrete_roughness(Path(G, -2.5 * p.values), 0.45).d_theta
    assert scaled == pytest.approx(2.5 * base, rel=1e-9)
    Q = special_ortho_group.rvs(2, random_state=3)
    rot = discrete_roughness(Path(G, p.values @ Q.T), 0.45).d_theta
    assert abs(rot - base) <= 0.02 * base


# ---------------------------------------------------------------- Gubinelli derivative bound

def test_derivative_bound_zero_case():
    rp = lift_fbm(fbm(1), 2)
    rep = discrete_roughness(fbm(1), 0.45)
    z = ControlledPath(rp, np.zeros((257, 1)), np.zeros((257, 1, 1)))
    assert gubinelli_derivative_bound(z, rep) == 0.0
    assert derivative_bound_ratio(z, rep) == 0.0


def test_derivative_bound_undefined_for_smooth_driver():
    p = Path(G, np.zeros((257, 1)))
    rep = discrete_roughness(p, 0.45)
    z = ControlledPath(lift_smooth(p), np.zeros((257, 1)), np.zeros((257, 1, 1)))
    with pytest.raises(UndefinedBoundError):
        gubinelli_derivative_bound(z, rep)


def test_derivative_bound_z_equals_x():
    for seed in range(100):
        p = fbm(seed, 2)
        rp = lift_fbm(p, 2)
        x0 = rp.values - rp.values[0]
        z = ControlledPath(rp, x0, np.broadcast_to(np.eye(2), (257, 2, 2)))
        rep = discrete_roughness(p, 0.45)
        bound = gubinelli_derivative_bound(z, rep)
        expect = constant("derivative_bound") * sup_norm(x0) / rep.l_theta_lower
        assert bound == pytest.approx(expect, rel=1e-12)
        assert sup_norm(z.derivative) <= bound


def test_derivative_bound_perturbed_derivative():
    # Z' + eta with the same Z: the remainder absorbs -eta dX and the bound stays valid,
    # but that remainder norm grows without limit under refinement
    eta = np.array([[0.3, -0.2], [0.1, 0.4]])
    norms = []
    for n in (65, 257, 1025):
        p = fbm(2, 2, n=n)
        rp = lift_fbm(p, 1)
        x0 = rp.values - rp.values[0]
        z = ControlledPath(rp, x0, np.broadcast_to(np.eye(2) + eta, (n, 2, 2)))
        rep = discrete_roughness(p, 0.45)
        assert sup_norm(z.derivative) <= gubinelli_derivative_bound(z, rep)
        norms.append(remainder_norm(z, 2 * rp.gamma))
    assert norms[0] < norms[1] < norms[2]


def test_derivative_bound_calibration_holds_on_fresh_instances():
    M = constant("derivative_bound")
    for i in range(60):
        z, rep = derivative_instance(777, i)
        assert derivative_bound_ratio(z, rep) <= M


# ---------------------------------------------------------------- Norris bound

def test_exponents():
    g, th = 0.35, 0.45
    beta = choose_beta(g, th)
    assert 1 / 3 < beta < g and 2 * beta > th
    r = sharp_exponent(g, th)
    assert r == pytest.approx((2 * g - th) ** 2 * (3 * g - 1) / (4 * g ** 2 * (1 + g)))
    assert 0 < norris_exponent(g, th, beta) <= r
    # the beta -> 1/3 limit of the proof exponent is a third of the closed form
    assert norris_exponent(g, th, 1 / 3) == pytest.approx(r / 3, rel=1e-12)
    with pytest.raises(HypothesisViolation):
        choose_beta(0.35, 0.7)


def _zero_a(rp):
    n, d = rp.values.shape
    return ControlledPath(rp, np.zeros((n, d)), np.zeros((n, d, d)))


def test_norris_zero_case():
    p = fbm(3)
    rp = lift_fbm(p, 2, gamma=0.35)
    rep = discrete_roughness(p, 0.45)
    cert = norris_bound(_zero_a(rp), Path(G, np.zeros((257, 1))), rp, rep)
    assert cert.lhs == 0 and cert.bound_value == 0 and cert.satisfied
    assert cert.q == NORRIS_Q == 6


def test_norris_rejects_theta_above_two_gamma():
    p = fbm(3)
    rp = lift_fbm(p, 2, gamma=0.35)
    rep = discrete_roughness(p, 0.75)
    with pytest.raises(HypothesisViolation):
        norris_bound(_zero_a(rp), Path(G, np.ones((257, 1))), rp, rep)


def test_norris_drift_scaling_family():
    # A = 0, B = 10^-k: Z_t = 10^-k t, lhs / ||Z||^r stays bounded as k grows
    p = fbm(5)
    rp = lift_fbm(p, 2, gamma=0.35)
    rep = discrete_roughness(p, 0.45)
    vals = []
    for k in range(0, 7):
        B = Path(G, np.full((257, 1), 10.0 ** -k))
        cert = norris_bound(_zero_a(rp), B, rp, rep)
        assert cert.z_sup == pytest.approx(10.0 ** -k, rel=1e-12)
        assert cert.satisfied
        vals.append(cert.lhs / cert.z_sup ** cert.r)
    assert max(vals) <= 1.0 + 1e-12
    assert np.all(np.diff(vals) < 0)


def test_norris_near_cancellation_inflates_r_quantity():
    # A = a, B = -a (X_{t+l} - X_t) / l: Z shrinks and R blows up as the lag l shrinks
    p = fbm(11, n=513)
    rp = lift_fbm(p, 2, gamma=0.35)
    rep = discrete_roughness(p, 0.45)
    g = rp.grid
    a = ControlledPath(rp, np.full((513, 1), 1.3), np.zeros((513, 1, 1)))
    x = rp.values[:, 0]
    zs, rs = [], []
    for lag in (32, 16, 8, 4, 2, 1):
        xs = np.concatenate([x, np.full(lag, x[-1])])
        b = -1.3 * (xs[lag:lag + 513] - x) / (lag * g.dt)
        cert = norris_bound(a, Path(g, b[:, None]), rp, rep)
        assert cert.satisfied
        zs.append(cert.z_sup / cert.lhs)
        rs.append(cert.r_quantity)
    assert np.all(np.diff(zs) < 0)
    assert np.all(np.diff(rs) > 0) and rs[-1] > 5 * rs[0]


def test_norris_proof_mode():
    A, B, rp, rep = norris_instance(3, 4)
    c1 = norris_bound(A, B, rp, rep)
    c2 = norris_bound(A, B, rp, rep, r_mode="proof")
    assert c2.r < c1.r and c1.r_sharp == c2.r_sharp
    assert c2.M == constant("norris_proof")
    with pytest.raises(DomainError):
        norris_bound(A, B, rp, rep, r_mode="other")


def test_norris_certificate_fields_consistent():
    A, B, rp, rep = norris_instance(9, 1)
    c = norris_bound(A, B, rp, rep)
    z = rough_integral(A, rp).z_values + drift_integral(B, rp.grid)
    assert c.z_sup == pytest.approx(sup_norm(z))
    assert c.bound_value == pytest.approx(c.M * c.r_quantity ** 6 * c.z_sup ** c.r)
    assert c.r == pytest.approx(sharp_exponent(0.35, 0.45))
    assert all(v >= 0 for v in (c.r_quantity, c.z_sup, c.lhs, c.bound_value))


def test_constants_file():
    c = load_constants()
    assert c["calibration_seed"] == 20240 and c["n_instances"] == 1000 and c["factor"] == 1.5
    for k in ("derivative_bound", "norris", "norris_proof", "interp_derivative"):
        assert c["M"][k] == pytest.approx(1.5 * c["max_ratio"][k], rel=1e-12)
    assert c["M"]["derivative_bound"] == pytest.approx(0.5189003033192293, rel=1e-12)
    assert c["M"]["norris"] == pytest.approx(2.9000564722287393e-07, rel=1e-12)
    assert c["M"]["interp_derivative"] == pytest.approx(2.3805663364331715, rel=1e-12)


# ---------------------------------------------------------------- interpolation

def test_interpolation_sup_l2_examples():
    c = Path(G, np.full((257, 1), 1.7))
    assert interpolation_sup_l2(c, 0.4) == pytest.approx(2 * 1.7, rel=1e-12)
    lin = Path(G, G.times[:, None])
    assert l2_norm(lin, G) == pytest.approx(3 ** -0.5, rel=1e-4)
    assert interpolation_sup_l2(lin, 1.0) == pytest.approx(2 * 3 ** (-1 / 3), rel=1e-4)


def test_interpolation_sup_l2_on_fbm():
    for r in range(500):
        p = sample_fbm(0.4, G, 31, 1, replicate=r)
        assert sup_norm(p.values) <= interpolation_sup_l2(p, 0.35)


def test_interpolation_derivative_examples():
    one = Path(G, np.ones((257, 1)))
    F = Path(G, drift_integral(one, G))
    assert interpolation_derivative(F, one, 0.35) >= 1.0
    zero = Path(G, np.zeros((257, 1)))
    assert interpolation_derivative(zero, zero, 0.35) == 0.0


def test_interpolation_derivative_random_smooth():
    M = constant("interp_derivative")
    rng = np.random.default_rng(5)
    t = G.times
    for _ in range(500):
        k = rng.integers(1, 5)
        b = sum(rng.normal() * np.cos(rng.uniform(0.5, 10) * t + rng.uniform(0, 6)) for _ in range(k))
        B = Path(G, b[:, None])
        F = Path(G, drift_integral(B, G))
        assert sup_norm(b) <= interpolation_derivative(F, B, 0.35, M=M)


# ---------------------------------------------------------------- tails

def test_tail_table_saturation():
    s = np.array([0.3, 0.5, 0.9])
    rows = tail_table(s, [0.0, 0.4, 2.0])
    assert rows[0][1] == 0.0 and rows[2][1] == 1.0
    assert rows[1][1] == pytest.approx(1 / 3)
    assert rows[1][2] == pytest.approx(math.sqrt(2 / 9 / 3))


def test_tail_study_shape():
    eps = np.linspace(0.2, 1.0, 9)
    res = roughness_tail_study(0.4, 0.45, 2000, eps, seed=0)
    probs = [p for _, p, _ in res["rows"]]
    assert np.all(np.diff(probs) >= 0)           # monotone in eps
    xs, ys = np.array(sorted(res["log_prob_vs_inv_eps2"])).T
    assert np.all(np.diff(ys) < 0)               # decreasing along eps^-2
    assert res["fitted_slope"] < 0


def test_tail_study_warns_below_hurst():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        roughness_tail_study(0.4, 0.35, 10, [0.5], seed=0)
    assert any("not guaranteed" in str(x.message) for x in w)


def test_report_is_dataclass():
    rep = RoughnessReport(0.5, 1.0, 0.1, (1, 0, np.array([1.0])), 3, 1, 1.0)
    assert rep.to_dict()["d_theta"] == 1.0
