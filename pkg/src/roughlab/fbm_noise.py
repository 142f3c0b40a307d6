"""Fractional Brownian motion: sampling, lifts, fractional calculus and
the conditional law of the future given the past.

Random streams
--------------
Every random draw comes from ``numpy.random.SeedSequence(seed,
spawn_key=(replicate, purpose, ...))`` so that replicate ``r`` of a master
seed is reproducible on its own, independent of how many replicates are
run or in which order.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, linalg, special

from .errors import DomainError, NumericalError
from .rough_core import Grid, Path, RoughPath, as_path, lift_fine_pl, lift_smooth

# stream purposes
_BASE = 0
_REFINE = 1          # + stage index
_WIENER = 1000


def replicate_rng(seed: int, replicate: int = 0, *purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(int(replicate),) + tuple(int(p) for p in purpose))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------- constants

def alpha_h(hurst: float) -> float:
    """Type-II normalisation: Var(alpha_H int_0^1 (1-r)^{H-1/2} dW_r) = 1."""
    return math.sqrt(2.0 * hurst)


def mvn_alpha(hurst: float) -> float:
    """Mandelbrot-van Ness constant making the two-sided process a unit fBm.

    With this constant the conditional future (drift of the past plus the
    type-II innovation) reproduces fBm exactly; it is smaller than
    ``alpha_h`` because part of the variance at time t is carried by the past.
    """
    h = hurst
    return math.sqrt(2 * h * special.gamma(1.5 - h) / (special.gamma(h + 0.5) * special.gamma(2 - 2 * h)))


def gamma_h(hurst: float) -> float:
    """Prefactor of the past-to-future operator: cos(pi H) / pi."""
    return math.cos(math.pi * hurst) / math.pi


def _check_hurst(hurst, lo=0.0, hi=1.0):
    if not lo < hurst < hi:
        raise DomainError(f"Hurst parameter must lie in ({lo}, {hi}), got {hurst}")


def default_gamma(hurst: float) -> float:
    """Hoelder exponent declared for lifts of fBm with Hurst index H."""
    return float(min(0.5, max(1 / 3 + 1e-3, hurst - 0.05)))


# ---------------------------------------------------------------- sampling

def fbm_covariance(s, t, hurst: float):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    h2 = 2 * hurst
    return 0.5 * (np.abs(s) ** h2 + np.abs(t) ** h2 - np.abs(t - s) ** h2)


def fgn_autocov(hurst: float, n: int, dt: float = 1.0) -> np.ndarray:
    """Autocovariance rho(k), k=0..n-1, of fBm increments over steps dt."""
    k = np.arange(n, dtype=float)
    h2 = 2 * hurst
    return 0.5 * dt ** h2 * (np.abs(k + 1) ** h2 - 2 * k ** h2 + np.abs(k - 1) ** h2)


@functools.lru_cache(maxsize=64)
def _embedding(hurst: float, n: int):
    """Eigenvalues of the size-2n circulant embedding of unit-step fGn."""
    rho = fgn_autocov(hurst, n + 1)
    row = np.concatenate([rho[:n + 1], rho[n - 1:0:-1]])
    lam = np.fft.fft(row).real
    return lam


def circulant_increment_covariance(hurst: float, n: int) -> np.ndarray:
    """Increment covariance implied by the circulant sampler (unit step).

    Equals the Toeplitz fGn covariance when the embedding is valid.
    """
    lam = _embedding(hurst, n)
    row = np.fft.ifft(lam).real[:n]
    return linalg.toeplitz(row)


def _fgn(hurst: float, n: int, dt: float, rng: np.random.Generator, width: int) -> np.ndarray:
    """``width`` independent fGn sequences of length n, shape (n, width)."""
    lam = _embedding(hurst, n)
    scale = dt ** hurst
    if lam.min() < -1e-10 * lam.max():
        rho = fgn_autocov(hurst, n)
        try:
            chol = np.linalg.cholesky(linalg.toeplitz(rho))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"circulant embedding has min eigenvalue {lam.min():.3e} and the "
                f"Cholesky fallback failed (H={hurst}, n={n})") from exc
        return scale * chol @ rng.standard_normal((n, width))
    m = lam.size
    z = rng.standard_normal((m, width)) + 1j * rng.standard_normal((m, width))
    w = np.fft.fft(np.sqrt(np.clip(lam, 0, None))[:, None] * z, axis=0) / math.sqrt(m)
    return scale * w.real[:n]


def sample_fbm(hurst: float, grid: Grid, seed: int, dim: int = 1, replicate: int = 0) -> Path:
    """One d-dimensional fBm sample on the grid, X_{t0} = 0.

    Coordinates are independent; the law on the nodes is exact.
    """
    _check_hurst(hurst)
    rng = replicate_rng(seed, replicate, _BASE)
    inc = _fgn(hurst, grid.n_steps, grid.dt, rng, dim)
    values = np.vstack([np.zeros((1, dim)), np.cumsum(inc, axis=0)])
    return Path(grid, values, hurst=hurst, seed=(int(seed), int(replicate)))


def sample_fbm_many(hurst: float, grid: Grid, seed: int, n_samples: int, dim: int = 1,
                    first: int = 0) -> np.ndarray:
    """Replicates first..first+n_samples-1, shape (n_samples, n_points, dim)."""
    out = np.empty((n_samples, grid.n_points, dim))
    for r in range(n_samples):
        out[r] = sample_fbm(hurst, grid, seed, dim, replicate=first + r).values
    return out


def _refine_once(values: np.ndarray, hurst: float, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Insert exact conditional midpoints into an fBm path on a uniform grid.

    The new increments are drawn as e = e_Y + Cov(e, c) Cov(c, c)^{-1} (c - c_Y)
    with e_Y an independent fine sample and c the given coarse increments
    (conditional simulation by kriging).  Coarse nodes are kept exactly.
    """
    c = np.diff(values, axis=0)
    n, d = c.shape
    h = dt / 2
    e_y = _fgn(hurst, 2 * n, h, rng, d)
    c_y = e_y[0::2] + e_y[1::2]
    rho_c = fgn_autocov(hurst, n, dt)
    w = linalg.solve_toeplitz(rho_c, c - c_y)
    u = np.repeat(w, 2, axis=0)
    rho_f = fgn_autocov(hurst, 2 * n, h)
    corr = linalg.matmul_toeplitz(rho_f, u)
    e = e_y + corr.reshape(e_y.shape)
    first = e[0::2]
    fine = np.empty((2 * n + 1, d))
    fine[0::2] = values
    fine[1::2] = values[:-1] + first
    return fine


def refine_path(path: Path, level: int) -> np.ndarray:
    """Values of the path on the grid refined ``level`` times by halving.

    fBm samples (carrying their seed) are refined by exact conditional
    midpoint insertion; other paths by linear interpolation.
    """
    if level < 0:
        raise DomainError("level must be >= 0")
    v = path.values
    if level == 0:
        return v.copy()
    if path.hurst is None or path.seed is None:
        g = path.grid.refine(level)
        t = g.times
        return np.column_stack([np.interp(t, path.grid.times, v[:, j]) for j in range(v.shape[1])])
    seed, rep = path.seed
    dt = path.grid.dt
    for stage in range(level):
        rng = replicate_rng(seed, rep, _REFINE + stage)
        v = _refine_once(v, path.hurst, dt, rng)
        dt /= 2
    return v


def lift_fbm(path: Path, level: int, gamma: Optional[float] = None) -> RoughPath:
    """Geometric lift from the piecewise-linear interpolant of the refined path.

    Areas are exact for the fine piecewise-linear path and are combined by
    Chen into per-step areas of the original grid.
    """
    if level < 0:
        raise DomainError("level must be >= 0")
    if gamma is None:
        gamma = default_gamma(path.hurst) if path.hurst is not None else 0.5
    if path.hurst is None:
        return lift_smooth(path, gamma=gamma)
    fine = refine_path(path, level)
    return lift_fine_pl(fine, path.grid, 2 ** level, gamma)


def fbm_chen_tolerance(rough: RoughPath, level: int) -> float:
    """Declared Chen tolerance for dyadic fBm lifts.

    Areas are sums over 2^level fine steps and reconstruction adds another
    cumulative sum over the grid, so float error grows with both.
    """
    from .rough_core import chen_tolerance
    return chen_tolerance(rough) * 2.0 ** (level / 2)


# ---------------------------------------------------------------- fractional calculus

def _second_diff_powers(m: np.ndarray, p: float) -> np.ndarray:
    """(m+1)^p - 2 m^p + (m-1)^p for integers m >= 1, without cancellation."""
    m = np.asarray(m, dtype=float)
    out = np.empty_like(m)
    one = m == 1
    out[one] = 2.0 ** p - 2.0
    mm = m[~one]
    x = 1.0 / mm
    out[~one] = mm ** p * (np.expm1(p * np.log1p(x)) + np.expm1(p * np.log1p(-x)))
    return out


def _convolve(a, b, n):
    if len(a) * len(b) > 4e8:
        from scipy.signal import fftconvolve
        return fftconvolve(a, b)[:n]
    return np.convolve(a, b)[:n]


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


def frac_integral(f, alpha: float, grid: Optional[Grid] = None) -> Path:
    """Riemann-Liouville integral (1/Gamma(a)) int_0^t (t-s)^{a-1} f(s) ds.

    Product-integration weights are exact for piecewise-linear f; time is
    measured from the first grid node.
    """
    _check_alpha(alpha)
    p = as_path(f, grid)
    v = p.values
    n = p.grid.n_steps
    dt = p.grid.dt
    pw = alpha + 1
    nn = np.arange(1, n + 1, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a0 = nn ** alpha * ((nn - 1) * np.expm1(alpha * np.log1p(-1 / nn)) + alpha)
    a0[0] = alpha
    kern = np.concatenate([[1.0], _second_diff_powers(np.arange(1, n), pw)])
    out = np.zeros_like(v)
    for j in range(v.shape[1]):
        conv = _convolve(v[1:, j], kern, n)
        out[1:, j] = a0 * v[0, j] + conv
    out *= dt ** alpha / special.gamma(alpha + 2)
    return Path(p.grid, out)


def frac_derivative(f, alpha: float, grid: Optional[Grid] = None) -> Path:
    """Riemann-Liouville derivative d/dt I^{1-a} f for piecewise-linear f.

    The (1-a)-integral of the interpolant is differentiated in closed form:
    f_0 t^{-a}/Gamma(1-a) + sum_j slope_j [(t-t_j)^{1-a} - (t-t_{j+1})^{1-a}]/Gamma(2-a).
    The value at the first node is 0 when f vanishes there and inf otherwise.
    """
    _check_alpha(alpha)
    p = as_path(f, grid)
    v = p.values
    n = p.grid.n_steps
    dt = p.grid.dt
    slopes = np.diff(v, axis=0) / dt
    m = np.arange(1, n + 1, dtype=float)
    b = dt ** (1 - alpha) * (m ** (1 - alpha) - (m - 1) ** (1 - alpha))
    t = (m * dt)
    out = np.zeros_like(v)
    for j in range(v.shape[1]):
        conv = _convolve(slopes[:, j], b, n)
        out[1:, j] = v[0, j] * t ** (-alpha) / special.gamma(1 - alpha) + conv / special.gamma(2 - alpha)
        out[0, j] = 0.0 if v[0, j] == 0 else np.inf
    return Path(p.grid, out)


# ---------------------------------------------------------------- kernel g and the drift operator

def kernel_g(v: float, hurst: float) -> float:
    """g(v) = v^{H-1/2} + (H-3/2) v int_0^1 (u+v)^{H-5/2} (1-u)^{1/2-H} du.

    Adaptive quadrature; the algebraic endpoint factor (1-u)^{1/2-H} is
    handled as a quadrature weight and the peak of (u+v)^{H-5/2} near u=0
    is isolated by splitting at a multiple of v.
    """
    if not v > 0:
        raise DomainError(f"kernel_g needs v > 0, got {v}")
    _check_hurst(hurst)
    a = hurst - 2.5
    b = 0.5 - hurst
    f = lambda u: (u + v) ** a
    opts = dict(epsabs=0.0, epsrel=1e-13, limit=400)
    cut = min(0.5, 20 * v)
    head = integrate.quad(lambda u: f(u) * (1 - u) ** b, 0.0, cut,
                          points=[min(v, cut / 2)] if v < cut else None, **opts)[0]
    tail = integrate.quad(f, cut, 1.0, weight="alg", wvar=(0.0, b), **opts)[0]
    return float(v ** (hurst - 0.5) + (hurst - 1.5) * v * (head + tail))


def kernel_g_closed(v, hurst: float):
    """Closed form v^{H+1/2} / (1+v) of the kernel (Euler integral)."""
    v = np.asarray(v, dtype=float)
    return v ** (hurst + 0.5) / (1 + v)


@functools.lru_cache(maxsize=32)
def _drift_matrix(hurst: float, n_future: int, dt_future: float, n_past: int, dt_past: float,
                  order: int = 12):
    """W with (G w)(t_i) = sum_j W[i, j] w(-r_j) for piecewise-linear w.

    Kernel: gamma_H (1/r) g(t/r) = gamma_H t^{H+1/2} r^{-H-1/2} / (r + t).
    The first past cell uses Gauss-Jacobi for the r^{-H-1/2} factor.
    """
    t = dt_future * np.arange(n_future)
    m = n_past - 1                      # number of past cells
    gl_x, gl_w = special.roots_legendre(order)
    gj_x, gj_w = special.roots_jacobi(order, 0.0, -hurst - 0.5)
    W = np.zeros((n_future, n_past))
    # regular cells j = 1..m-1 : [r_j, r_{j+1}]
    if m > 1:
        left = dt_past * np.arange(1, m)
        r = left[:, None] + dt_past * (gl_x[None, :] + 1) / 2          # (cells, order)
        lam = (r - left[:, None]) / dt_past                              # hat coordinate
        w = gl_w[None, :] * dt_past / 2
        base = r ** (-hurst - 0.5) * w
        for i in range(1, n_future):
            k = base / (r + t[i])
            W[i, 1:m] += np.sum(k * (1 - lam), axis=1)
            W[i, 2:m + 1] += np.sum(k * lam, axis=1)
    # first cell [0, dt_past]: r = dt_past (1 + x) / 2, weight (1+x)^{-H-1/2}
    r0 = dt_past * (gj_x + 1) / 2
    wj = gj_w * (dt_past / 2) ** (0.5 - hurst)
    lam0 = r0 / dt_past
    for i in range(1, n_future):
        k = wj / (r0 + t[i])
        W[i, 0] += np.sum(k * (1 - lam0))
        W[i, 1] += np.sum(k * lam0)
    W *= (t ** (hurst + 0.5))[:, None] * gamma_h(hurst)
    W.flags.writeable = False
    return W


def conditional_drift(past, hurst: float, grid: Grid) -> Path:
    """Conditional mean of the future given the past, on ``grid``.

    ``past`` lives on [-T_-, 0] with value 0 at time 0.  The integral over
    r is truncated at T_- (no contribution from before the recorded past);
    for fBm pasts the neglected tail is of order t^{H+1/2} T_-^{-1/2}.
    """
    _check_hurst(hurst)
    dim = past.values.shape[1] if past is not None and past.values.size else 1
    if past is None or past.grid.n_points < 2:
        return Path(grid, np.zeros((grid.n_points, dim)))
    if abs(past.grid.t1) > 1e-12 * max(1.0, abs(past.grid.t0)):
        raise DomainError("past must end at time 0")
    if np.max(np.abs(past.values[-1])) > 1e-12 * max(1.0, np.max(np.abs(past.values))):
        raise DomainError("past must vanish at time 0")
    W = _drift_matrix(float(hurst), grid.n_points, grid.dt, past.grid.n_points, past.grid.dt)
    w_rev = past.values[::-1]           # w(-r_j), j = 0..n_past-1
    return Path(grid, W @ w_rev)


# ---------------------------------------------------------------- conditional future

@dataclass(frozen=True)
class NoiseRecord:
    hurst: float
    past: Optional[Path]
    wiener_increments: np.ndarray        # (n_fine, d) Brownian increments
    near_increments: np.ndarray          # (n_fine, d) exact last-cell kernel integrals
    future_lift: RoughPath
    seed: int
    lift_level: int
    alpha: float
    drift: Path = field(repr=False)
    fine_values: np.ndarray = field(repr=False, default=None)


def volterra_from_normals(normals: np.ndarray, hurst: float, h: float, alpha: float):
    """Type-II process alpha int_0^t (t-r)^{H-1/2} dW_r on a grid of step h.

    Hybrid scheme: the cell adjacent to each node is integrated exactly
    (jointly Gaussian with the Brownian increment); earlier cells use the
    cell average of the kernel.  ``normals`` has shape (n, d, 2).
    Returns (values (n+1, d), dW (n, d), near (n, d)).
    """
    a = hurst - 0.5
    n, d, _ = normals.shape
    var_w = h
    var_y = h ** (2 * hurst) / (2 * hurst)
    cov = h ** (hurst + 0.5) / (hurst + 0.5)
    l11 = math.sqrt(var_w)
    l21 = cov / l11
    l22 = math.sqrt(max(var_y - l21 ** 2, 0.0))
    dw = l11 * normals[..., 0]
    near = l21 * normals[..., 0] + l22 * normals[..., 1]
    k = np.arange(2, n + 1, dtype=float)
    b = h ** a * (k ** (a + 1) - (k - 1) ** (a + 1)) / (a + 1)
    vals = np.zeros((n + 1, d))
    for j in range(d):
        far = np.concatenate([[0.0], np.convolve(dw[:, j], b)[:n - 1]]) if n > 1 else np.zeros(1)
        vals[1:, j] = alpha * (near[:, j] + far)
    return vals, dw, near


def sample_conditional_future(past: Optional[Path], hurst: float, grid: Grid, seed: int,
                              level: int = 0, dim: Optional[int] = None, replicate: int = 0,
                              alpha: Optional[float] = None, gamma: Optional[float] = None,
                              normals: Optional[np.ndarray] = None) -> NoiseRecord:
    """Future noise = conditional drift of the past + type-II innovation.

    The innovation is built on the grid refined ``level`` times and the sum
    is lifted from its piecewise-linear interpolant.  ``alpha`` defaults to
    ``alpha_h`` (unit variance of the innovation at t=1); pass
    ``mvn_alpha(H)`` to make past and future a single fBm.
    """
    _check_hurst(hurst, 1 / 3, 0.5)
    if level < 0:
        raise DomainError("level must be >= 0")
    if dim is None:
        dim = past.values.shape[1] if past is not None else 1
    alpha = alpha_h(hurst) if alpha is None else float(alpha)
    gamma = default_gamma(hurst) if gamma is None else gamma
    fine_grid = grid.refine(level)
    n = fine_grid.n_steps
    if normals is None:
        normals = replicate_rng(seed, replicate, _WIENER).standard_normal((n, dim, 2))
    normals = np.asarray(normals, dtype=float)
    innov, dw, near = volterra_from_normals(normals, hurst, fine_grid.dt, alpha)
    drift_fine = conditional_drift(past, hurst, fine_grid)
    fine = innov + drift_fine.values
    lift = lift_fine_pl(fine, grid, 2 ** level, gamma)
    drift = Path(grid, drift_fine.values[::2 ** level])
    return NoiseRecord(hurst, past, dw, near, lift, int(seed), int(level), alpha,
                       drift, fine)
