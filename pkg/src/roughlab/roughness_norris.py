"""Hoelder roughness and quantitative Doob-Meyer (Norris-type) bounds.

The roughness modulus is estimated through its dyadic discrete analogue

    D_theta = inf_phi inf_n inf_k sup_{s,t in I_{k,n}} |<phi, dX_st>| / (2^-n T)^theta,

and L_theta >= D_theta / (2 8^theta).  The inner sup over an interval is
the width of the interval's node values in direction phi.

Constants M in the deterministic bounds are existential; they are fixed
empirically (see ``lab.calibrate_constants``) and read from the versioned
file ``data/constants.json``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import DomainError, HypothesisViolation, UndefinedBoundError
from .rough_core import (ControlledPath, Grid, RoughPath, as_path, c_gamma_norm,
                         controlled_norm, holder_seminorm, remainder_norm, rough_path_norm,
                         sup_norm)

NORRIS_Q = 6
CONSTANTS_FILE = "constants.json"


@lru_cache(maxsize=1)
def load_constants() -> dict:
    with resources.files("roughlab").joinpath("data", CONSTANTS_FILE).open() as fh:
        return json.load(fh)


def constant(name: str) -> float:
    c = load_constants()
    if name not in c.get("M", {}):
        raise KeyError(f"calibrated constant {name!r} missing from {CONSTANTS_FILE}")
    return float(c["M"][name])


# ---------------------------------------------------------------- roughness

@dataclass(frozen=True)
class RoughnessReport:
    theta: float
    d_theta: float
    l_theta_lower: float
    argmin: tuple
    n_max: int
    sphere_resolution: int
    horizon: float

    def to_dict(self) -> dict:
        d = asdict(self)
        lvl, k, phi = self.argmin
        d["argmin"] = {"level": int(lvl), "interval": int(k), "direction": [float(x) for x in phi]}
        return d


def default_n_max(n_points: int) -> int:
    steps = n_points - 1
    two = 0
    while steps % 2 == 0 and steps > 1:
        steps //= 2
        two += 1
    return max(1, min(two, int(math.floor(math.log2(n_points - 1))) - 3))


def directions(d: int, resolution: int) -> np.ndarray:
    """Half-sphere direction grid: angles for d=2, Fibonacci lattice for d=3,
    Gaussian draws (fixed seed) beyond."""
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        a = np.pi * np.arange(resolution) / resolution
        return np.column_stack([np.cos(a), np.sin(a)])
    if d == 3:
        i = np.arange(resolution) + 0.5
        z = i / resolution                          # upper hemisphere
        phi = np.pi * (1 + 5 ** 0.5) * i
        r = np.sqrt(1 - z ** 2)
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    g = np.random.default_rng(12345).standard_normal((resolution, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _interval_widths(proj: np.ndarray, m: int) -> np.ndarray:
    """Width (max - min) of projected values over [k m, (k+1) m] for all k."""
    starts = np.arange(0, proj.shape[0] - 1, m)
    mx = np.maximum(np.maximum.reduceat(proj[:-1], starts, axis=0), proj[starts + m])
    mn = np.minimum(np.minimum.reduceat(proj[:-1], starts, axis=0), proj[starts + m])
    return mx - mn


def _width(points: np.ndarray, phi: np.ndarray) -> float:
    p = points @ phi
    return float(p.max() - p.min())


def discrete_roughness(path, theta: float, n_max: Optional[int] = None,
                       sphere_resolution: Optional[int] = None, refine: bool = True,
                       grid: Optional[Grid] = None) -> RoughnessReport:
    """Discrete roughness modulus with certified lower bound for L_theta."""
    if not 0 < theta <= 1:
        raise DomainError(f"theta must lie in (0, 1], got {theta}")
    p = as_path(path, grid)
    x = p.values
    n, d = x.shape
    steps = n - 1
    if n_max is None:
        n_max = default_n_max(n)
    if n_max < 1 or steps % 2 ** n_max:
        raise DomainError(f"{steps} grid cells cannot be split into 2^{n_max} dyadic intervals")
    if sphere_resolution is None:
        sphere_resolution = {1: 1, 2: 360, 3: 2000}.get(d, 4000)
    T = p.grid.length
    dirs = directions(d, sphere_resolution)
    proj = (x - x[0]) @ dirs.T                      # (n, n_dirs)
    best = (np.inf, None)
    cands = []
    for lvl in range(1, n_max + 1):
        m = steps // 2 ** lvl
        w = _interval_widths(proj, m) / (2.0 ** -lvl * T) ** theta       # (2^lvl, n_dirs)
        k, j = np.unravel_index(np.argmin(w), w.shape)
        if w[k, j] < best[0]:
            best = (float(w[k, j]), (lvl, int(k), dirs[j].copy()))
        if d >= 2 and refine:
            per_k = w.min(axis=1)
            order = np.argsort(per_k)[:4]
            for kk in order:
                cands.append((float(per_k[kk]), lvl, int(kk), dirs[int(np.argmin(w[kk]))]))
    if d >= 2 and refine:
        cands.sort(key=lambda c: c[0])
        for val, lvl, k, phi0 in cands[:8]:
            m = steps // 2 ** lvl
            pts = x[k * m:(k + 1) * m + 1]
            scale = (2.0 ** -lvl * T) ** theta
            phi, v = _polish(pts, phi0, sphere_resolution)
            v /= scale
            if v < best[0]:
                best = (v, (lvl, k, phi))
    d_theta = max(best[0], 0.0)
    return RoughnessReport(float(theta), float(d_theta), float(d_theta / (2 * 8 ** theta)),
                           best[1], int(n_max), int(sphere_resolution), float(T))


def _polish(points, phi0, resolution):
    d = points.shape[1]
    if d == 2:
        a0 = math.atan2(phi0[1], phi0[0])
        da = 2 * np.pi / resolution
        f = lambda a: _width(points, np.array([math.cos(a), math.sin(a)]))
        res = optimize.minimize_scalar(f, bracket=None, bounds=(a0 - da, a0 + da), method="bounded",
                                       options={"xatol": 1e-10})
        a = float(res.x)
        cand = [(f(a0), a0), (float(res.fun), a)]
        v, a = min(cand)
        return np.array([math.cos(a), math.sin(a)]), v

    def f(u):
        nu = np.linalg.norm(u)
        return _width(points, u / nu) if nu > 0 else np.inf

    res = optimize.minimize(f, phi0, method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 400 * d})
    u = res.x / np.linalg.norm(res.x)
    v = _width(points, u)
    v0 = _width(points, phi0)
    return (u, v) if v < v0 else (phi0, v0)


def brute_roughness(path, theta: float, n_max: int, dirs: np.ndarray, grid=None) -> float:
    """Plain grid evaluation of D_theta over the supplied directions (no polish)."""
    p = as_path(path, grid)
    x = p.values
    steps = x.shape[0] - 1
    proj = x @ np.asarray(dirs).T
    out = np.inf
    for lvl in range(1, n_max + 1):
        m = steps // 2 ** lvl
        w = _interval_widths(proj, m) / (2.0 ** -lvl * p.grid.length) ** theta
        out = min(out, float(w.min()))
    return out


# ---------------------------------------------------------------- Gubinelli derivative bound

def _certified_l(report: RoughnessReport) -> float:
    if not report.l_theta_lower > 0:
        raise UndefinedBoundError("roughness lower bound is 0: driver is not certified rough")
    return report.l_theta_lower


def gubinelli_derivative_bound(controlled: ControlledPath, report: RoughnessReport,
                               M: Optional[float] = None, gamma: Optional[float] = None) -> float:
    """(M ||Z||_inf / L) max(||R^Z||^{th/2g} ||Z||^{-th/2g}, T^{-th}).

    Written as (M/L) max(||Z||^{1-th/2g} ||R||^{th/2g}, ||Z|| T^{-th}) so
    that Z = 0 gives 0.
    """
    L = _certified_l(report)
    g = controlled.base.gamma if gamma is None else gamma
    M = constant("derivative_bound") if M is None else M
    th = report.theta
    z = sup_norm(controlled.z_values)
    r = remainder_norm(controlled, 2 * g)
    T = controlled.grid.length
    e = th / (2 * g)
    return float(M / L * max(z ** (1 - e) * r ** e, z * T ** (-th)))


def derivative_bound_ratio(controlled: ControlledPath, report: RoughnessReport,
                 gamma: Optional[float] = None) -> float:
    """||Z'||_inf divided by the bound evaluated with M = 1."""
    b = gubinelli_derivative_bound(controlled, report, M=1.0, gamma=gamma)
    lhs = sup_norm(controlled.derivative)
    if b == 0:
        return 0.0 if lhs == 0 else np.inf
    return lhs / b


# ---------------------------------------------------------------- Norris bound

def choose_beta(gamma: float, theta: float, tiny: float = 1e-6) -> float:
    """beta in (1/3, gamma) with 2 beta > theta."""
    beta = max((1 / 3 + gamma) / 2, (theta / 2 + gamma) / 2 + tiny)
    lo, hi = 1 / 3 + tiny, gamma - tiny
    if lo > hi or theta / 2 >= hi:
        raise HypothesisViolation(f"no beta in (1/3, {gamma}) with 2 beta > {theta}")
    return float(min(max(beta, lo), hi))


def norris_exponent(gamma: float, theta: float, beta: float) -> float:
    """Exponent of ||Z||_inf bounding ||B||_inf (the smaller of the two).

    r = (1 - th/2g)^2 (1 - beta/g) g / (1 + g); the exponent for A is
    1 - th/2g, which is larger.
    """
    e = 1 - theta / (2 * gamma)
    return float(min(e, e ** 2 * (1 - beta / gamma) * gamma / (1 + gamma)))


def sharp_exponent(gamma: float, theta: float) -> float:
    return float((2 * gamma - theta) ** 2 * (3 * gamma - 1) / (4 * gamma ** 2 * (1 + gamma)))


@dataclass(frozen=True)
class NorrisCertificate:
    r_quantity: float
    z_sup: float
    lhs: float
    q: int
    r: float
    r_sharp: float
    beta: float
    M: float
    bound_value: float
    satisfied: bool
    ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def drift_integral(b_path, grid: Grid) -> np.ndarray:
    """Trapezoidal cumulative integral of B from the first node."""
    b = as_path(b_path, grid).values
    dt = grid.dt
    return np.concatenate([np.zeros((1,) + b.shape[1:]), np.cumsum(0.5 * dt * (b[1:] + b[:-1]), axis=0)])


def build_z(a_controlled: ControlledPath, b_path, rough: RoughPath) -> np.ndarray:
    from .rde_flow import rough_integral
    za = rough_integral(a_controlled, rough).z_values
    zb = drift_integral(b_path, rough.grid)
    return za + zb.reshape(za.shape)


def norris_bound(a_controlled: ControlledPath, b_path, rough: RoughPath, report: RoughnessReport,
                 M: Optional[float] = None, beta: Optional[float] = None,
                 r_mode: str = "sharp") -> NorrisCertificate:
    """Certificate for ||A||_inf + ||B||_inf < M R^6 ||Z||_inf^r with
    Z = int A dX + int B dt and
    R = 1 + 1/L + ||(X,XX)||_g + ||(A,A')||_{X,g} + ||B||_{C^g}.

    ``r_mode="sharp"`` uses the closed form (2g-th)^2 (3g-1) / (4g^2 (1+g));
    ``r_mode="proof"`` uses the beta-dependent exponent ``norris_exponent``,
    which is smaller.
    """
    g = rough.gamma
    th = report.theta
    if th >= 2 * g:
        raise HypothesisViolation(f"theta = {th} must be < 2 gamma = {2 * g}")
    L = _certified_l(report)
    beta = choose_beta(g, th) if beta is None else beta
    if r_mode == "sharp":
        r = sharp_exponent(g, th)
    elif r_mode == "proof":
        r = norris_exponent(g, th, beta)
    else:
        raise DomainError(f"unknown r_mode {r_mode!r}")
    M = constant("norris" if r_mode == "sharp" else "norris_proof") if M is None else M
    z = build_z(a_controlled, b_path, rough)
    b = as_path(b_path, rough.grid)
    big_r = (1 + 1 / L + rough_path_norm(rough) + controlled_norm(a_controlled, g)
             + c_gamma_norm(b, g))
    z_sup = sup_norm(z)
    lhs = sup_norm(a_controlled.z_values) + sup_norm(b.values)
    denom = big_r ** NORRIS_Q * z_sup ** r
    ratio = 0.0 if lhs == 0 else (np.inf if denom == 0 else lhs / denom)
    bound = M * denom
    return NorrisCertificate(float(big_r), z_sup, lhs, NORRIS_Q, r, sharp_exponent(g, th),
                             float(beta), float(M), float(bound), bool(lhs <= bound), float(ratio))


# ---------------------------------------------------------------- interpolation inequalities

def l2_norm(f, grid: Grid) -> float:
    v = as_path(f, grid).values
    sq = np.sum(v ** 2, axis=1)
    return float(math.sqrt(grid.dt * (np.sum(sq) - 0.5 * (sq[0] + sq[-1]))))


def interpolation_sup_l2(f, gamma: float, grid: Optional[Grid] = None) -> float:
    """2 max(T^{-1/2}||f||_2, ||f||_2^{2g/(2g+1)} ||f||_g^{1/(2g+1)})."""
    p = as_path(f, grid)
    T = p.grid.length
    l2 = l2_norm(p, p.grid)
    h = holder_seminorm(p, gamma)
    return float(2 * max(T ** -0.5 * l2, l2 ** (2 * gamma / (2 * gamma + 1)) * h ** (1 / (2 * gamma + 1))))


def interpolation_derivative(F, B, gamma: float, grid: Optional[Grid] = None,
                             M: Optional[float] = None) -> float:
    """M ||F||_inf max(1/T, ||F||_inf^{-1/(g+1)} ||B||_g^{1/(g+1)}) with F' = B."""
    fp = as_path(F, grid)
    bp = as_path(B, fp.grid)
    M = constant("interp_derivative") if M is None else M
    T = fp.grid.length
    fs = sup_norm(fp.values)
    if fs == 0:
        return 0.0
    hb = holder_seminorm(bp, gamma)
    return float(M * fs * max(1 / T, fs ** (-1 / (gamma + 1)) * hb ** (1 / (gamma + 1))))


# ---------------------------------------------------------------- tail study

def roughness_samples(hurst: float, theta: float, n_samples: int, seed: int = 0,
                      n_points: int = 257, dim: int = 1, n_max: Optional[int] = None) -> np.ndarray:
    from .fbm_noise import sample_fbm
    grid = Grid(0.0, 1.0, n_points)
    out = np.empty(n_samples)
    for r in range(n_samples):
        p = sample_fbm(hurst, grid, seed, dim, replicate=r)
        out[r] = discrete_roughness(p, theta, n_max).d_theta
    return out


def tail_table(samples: np.ndarray, epsilons: Sequence[float]) -> list:
    """Rows (epsilon, P(D < epsilon), binomial standard error)."""
    s = np.asarray(samples)
    n = s.size
    rows = []
    for eps in epsilons:
        p = float(np.mean(s < eps)) if eps > 0 else 0.0
        rows.append((float(eps), p, float(math.sqrt(p * (1 - p) / n))))
    return rows


def roughness_tail_study(hurst: float, theta: float, n_samples: int, epsilons: Sequence[float],
                         seed: int = 0, n_points: int = 257, dim: int = 1) -> dict:
    """Monte-Carlo tail of D_theta with log P against eps^-2."""
    if theta <= hurst:
        warnings.warn(f"theta = {theta} <= H = {hurst}: roughness is not guaranteed", RuntimeWarning)
    samples = roughness_samples(hurst, theta, n_samples, seed, n_points, dim)
    rows = tail_table(samples, epsilons)
    pts = [(e ** -2, math.log(p)) for e, p, _ in rows if 0 < p]
    slope = float("nan")
    if len(pts) >= 2:
        xs, ys = np.array(pts).T
        slope = float(np.polyfit(xs, ys, 1)[0])
    return {"rows": rows, "log_prob_vs_inv_eps2": pts, "fitted_slope": slope,
            "samples": samples, "hurst": hurst, "theta": theta, "n_samples": n_samples, "seed": seed}
