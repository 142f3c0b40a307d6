"""Hoermander brackets, Malliavin matrices, controls and the Lambda cutoff.

Conventions.  F(s) = J_{0,s}^{-1} V(Z_s) is the (n, d) matrix whose
columns are the pulled-back driving fields.  The reduced Malliavin matrix
is C_T = int_0^T F F^T ds.  Against the Wiener process of the
one-sided (Volterra) representation X_t = alpha_H int_0^t (t-r)^{H-1/2} dW_r
the derivative of the solution is J_{0,T} K F(s) with

    K F(s) = alpha_H [ (T-s)^a F(T) - int_s^T (r-s)^a F'(r) dr ],   a = H - 1/2,

and M_T = J_{0,T} (int_0^T K F K F^T ds) J_{0,T}^T.  F is taken piecewise
linear between grid nodes so the inner integral is exact.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
import sympy as sp
from scipy import linalg, special

from .errors import (DomainError, HypothesisViolation, NotControllableError, PrecisionError)
from .fbm_noise import alpha_h, lift_fbm, sample_fbm
from .rde_flow import FlowTriple, VectorFieldSystem, builtin_system, jacobian_flow
from .rough_core import Grid, RoughPath, antisymmetric

RANK_TOL = 1e-8
H_FD = 1e-5
FD_MAX_LEVEL = 3


# ---------------------------------------------------------------- brackets

def lie_bracket(U, V, z) -> np.ndarray:
    """[U, V](z) = DV(z) U(z) - DU(z) V(z); U and V are (field, jacobian) pairs."""
    u, du = U
    v, dv = V
    return np.asarray(dv(z) @ u(z) - du(z) @ v(z), dtype=float)


def _fd_jacobian(f, h=H_FD):
    def df(z):
        z = np.asarray(z, dtype=float)
        cols = []
        for b in range(z.shape[-1]):
            e = np.zeros_like(z)
            e[b] = h
            cols.append((f(z + e) - f(z - e)) / (2 * h))
        return np.stack(cols, axis=-1)
    return df


@dataclass
class BracketLadder:
    """Nested families V_0 = {V_1..V_d}, V_{n+1} = V_n + {[U, V_k]: U in V_n, k >= 0}.

    ``levels[n]`` lists the evaluators (f, Df) that are new at level n, so
    the family of level n is the union of ``levels[:n+1]``.
    """
    levels: List[list]
    max_level: int
    mode: str
    labels: List[list] = field(default_factory=list)

    def family(self, n: int) -> list:
        return [e for lvl in self.levels[:n + 1] for e in lvl]

    def evaluate(self, z, n: Optional[int] = None) -> np.ndarray:
        """(n_state, m) matrix of all fields of level <= n at z."""
        n = self.max_level if n is None else n
        fam = self.family(n)
        if not fam:
            return np.zeros((len(np.atleast_1d(z)), 0))
        return np.column_stack([np.asarray(f(z), dtype=float) for f, _ in fam])


def _symbolic_ladder(vfs: VectorFieldSystem, max_level: int) -> BracketLadder:
    syms, drift, fields = vfs.symbolic
    x = sp.Matrix(syms)
    base = [sp.Matrix(drift)] + [sp.Matrix(v) for v in fields]
    jac = [b.jacobian(x) for b in base]

    def evaluator(expr):
        fn = sp.lambdify(syms, list(expr), "numpy")
        dfn = sp.lambdify(syms, expr.jacobian(x).tolist(), "numpy")
        f = lambda z: np.array(fn(*np.asarray(z, float)), dtype=float)
        df = lambda z: np.array(dfn(*np.asarray(z, float)), dtype=float)
        return f, df

    seen = set()
    level_exprs = []
    current = []
    for j, v in enumerate(base[1:]):
        v = sp.Matrix([sp.expand(c) for c in v])
        key = tuple(v)
        if all(c == 0 for c in v) or key in seen:
            continue
        seen.add(key)
        current.append((v, f"V{j + 1}"))
    level_exprs.append(current)
    for lvl in range(1, max_level + 1):
        new = []
        for u, lab in level_exprs[-1]:
            du = u.jacobian(x)
            for k, (vk, dvk) in enumerate(zip(base, jac)):
                br = sp.Matrix([sp.expand(c) for c in (dvk * u - du * vk)])
                key = tuple(br)
                if all(c == 0 for c in br) or key in seen:
                    continue
                seen.add(key)
                new.append((br, f"[{lab},V{k}]"))
        level_exprs.append(new)
    levels = [[evaluator(e) for e, _ in lvl] for lvl in level_exprs]
    labels = [[lab for _, lab in lvl] for lvl in level_exprs]
    return BracketLadder(levels, max_level, "symbolic", labels)


def _numeric_ladder(vfs: VectorFieldSystem, max_level: int) -> BracketLadder:
    if max_level > FD_MAX_LEVEL:
        raise PrecisionError(
            f"bracket level {max_level} > {FD_MAX_LEVEL} needs analytic Jacobians; "
            "finite-difference noise compounds per level")
    base = list(vfs.field_list())
    level = [base[j] for j in range(1, len(base))]
    labels = [[f"V{j}" for j in range(1, len(base))]]
    levels = [level]
    for _ in range(max_level):
        new, lab = [], []
        for i, u in enumerate(levels[-1]):
            for k, vk in enumerate(base):
                f = lambda z, u=u, vk=vk: lie_bracket(u, vk, z)
                new.append((f, _fd_jacobian(f)))
                lab.append(f"[{labels[-1][i]},V{k}]")
        levels.append(new)
        labels.append(lab)
    return BracketLadder(levels, max_level, "finite-difference", labels)


def bracket_ladder(vfs: VectorFieldSystem, max_level: int, mode: str = "auto") -> BracketLadder:
    if max_level < 0:
        raise DomainError("max_level must be >= 0")
    if mode == "auto":
        mode = "symbolic" if vfs.symbolic is not None else "fd"
    if mode == "symbolic":
        if vfs.symbolic is None:
            raise DomainError("system has no symbolic form")
        return _symbolic_ladder(vfs, max_level)
    return _numeric_ladder(vfs, max_level)


@dataclass
class HormanderReport:
    rank: int
    full_rank_level: Optional[int]
    dim_state: int
    singular_values: list
    n_fields: int
    mode: str
    rank_tol: float
    warnings: list

    @property
    def satisfied(self) -> bool:
        return self.full_rank_level is not None

    def to_dict(self) -> dict:
        return {"rank": self.rank, "full_rank_level": self.full_rank_level,
                "dim_state": self.dim_state, "satisfied": self.satisfied,
                "singular_values": self.singular_values, "n_fields": self.n_fields,
                "mode": self.mode, "rank_tol": self.rank_tol, "warnings": self.warnings}


def numerical_rank(mat: np.ndarray, rank_tol: float = RANK_TOL):
    if mat.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(mat, compute_uv=False)
    if s[0] == 0:
        return 0, s
    return int(np.sum(s > rank_tol * s[0])), s


def hormander_rank(vfs: VectorFieldSystem, z, max_level: int, rank_tol: float = RANK_TOL,
                   mode: str = "auto") -> HormanderReport:
    """Rank of span{U(z): U in V_N} and the first level reaching full rank."""
    z = np.asarray(z, dtype=float)
    ladder = bracket_ladder(vfs, max_level, mode)
    n = vfs.dim_state
    first = None
    rank, s = 0, np.zeros(0)
    for lvl in range(max_level + 1):
        rank, s = numerical_rank(ladder.evaluate(z, lvl), rank_tol)
        if rank == n and first is None:
            first = lvl
            break
    notes = []
    if ladder.mode == "finite-difference" and s.size and s[0] > 0:
        kept = s[s > rank_tol * s[0]]
        if kept.size and kept[-1] / s[0] < 1e3 * rank_tol:
            notes.append("smallest retained singular value is close to the rank threshold; "
                         "finite-difference brackets may be unreliable")
    return HormanderReport(rank, first, n, [float(v) for v in s], int(ladder.evaluate(z, lvl).shape[1]),
                           ladder.mode, rank_tol, notes)


def kalman_rank(A, C, k: Optional[int] = None, rank_tol: float = RANK_TOL) -> int:
    """rank(C, AC, ..., A^k C); k defaults to n - 1."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    n = A.shape[0]
    k = n - 1 if k is None else k
    blocks = [C]
    for _ in range(k):
        blocks.append(A @ blocks[-1])
    return numerical_rank(np.hstack(blocks), rank_tol)[0]


# ---------------------------------------------------------------- Malliavin matrices

def pulled_back_fields(flow: FlowTriple, vfs: VectorFieldSystem) -> np.ndarray:
    """F(s) = J_{0,s}^{-1} V(Z_s) at every node, shape (N+1, n, d)."""
    return np.einsum("kab,kbj->kaj", flow.jac_inv, vfs.fields(flow.z))


def _trapezoid_weights(n_points: int, dt: float) -> np.ndarray:
    w = np.full(n_points, dt)
    w[0] = w[-1] = dt / 2
    return w


def _sym(m):
    return 0.5 * (m + m.T)


def reduced_malliavin(flow: FlowTriple, vfs: VectorFieldSystem) -> np.ndarray:
    """Trapezoidal C_T = int_0^T F F^T ds."""
    F = pulled_back_fields(flow, vfs)
    w = _trapezoid_weights(F.shape[0], flow.grid.dt)
    return _sym(np.einsum("k,kaj,kbj->ab", w, F, F))


@lru_cache(maxsize=32)
def _cell_rule(n_sub: int, n_gauss: int, ratio: float):
    """Nodes in (0, 1) measured from the right end of a cell, graded towards 0."""
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    edges = np.concatenate([[0.0], ratio ** np.arange(n_sub - 1, -1, -1)])
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(a + (b - a) * (x + 1) / 2)
        weights.append((b - a) * w / 2)
    return np.concatenate(nodes), np.concatenate(weights)


def _phi(r0, r1, s, a):
    """int_{max(r0,s)}^{r1} (r - s)^a dr for s < r1, 0 when s >= r1."""
    up = np.clip(r1 - s, 0.0, None)
    lo = np.clip(r0 - s, 0.0, None)
    return (up ** (a + 1) - lo ** (a + 1)) / (a + 1)


def kernel_transform(F: np.ndarray, grid: Grid, hurst: float, s: np.ndarray) -> np.ndarray:
    """K F(s) for piecewise-linear F on the grid, evaluated at times s < T."""
    a = hurst - 0.5
    T = grid.t1
    h = grid.dt
    r = grid.times
    slope = np.diff(F, axis=0) / h                                  # (N, n, d)
    phi = _phi(r[None, :-1], r[None, 1:], s[:, None], a)            # (Q, N)
    integral = np.einsum("qj,jab->qab", phi, slope)
    return alpha_h(hurst) * ((T - s)[:, None, None] ** a * F[-1] - integral)


def malliavin_matrix(flow: FlowTriple, vfs: VectorFieldSystem, hurst: float,
                     n_sub: int = 4, n_gauss: int = 6, chunk: int = 4096) -> np.ndarray:
    """M_T = J_T (int_0^T KF KF^T ds) J_T^T, a Gram matrix hence PSD."""
    if not 1 / 3 < hurst < 0.5:
        raise DomainError(f"H must lie in (1/3, 1/2), got {hurst}")
    grid = flow.grid
    F = pulled_back_fields(flow, vfs)
    n = F.shape[1]
    a = hurst - 0.5
    h = grid.dt
    N = grid.n_steps
    r = grid.times
    T = grid.t1
    u, wu = _cell_rule(n_sub, n_gauss, 0.25)
    gram = np.zeros((n, n))
    if N > 1:
        s = (r[1:N][:, None] - h * u[None, :]).ravel()             # cells 0..N-2
        w = np.tile(h * wu, N - 1)
        for i in range(0, s.size, chunk):
            kf = kernel_transform(F, grid, hurst, s[i:i + chunk])
            gram += np.einsum("q,qaj,qbj->ab", w[i:i + chunk], kf, kf)
    # last cell: K F (s) = (T-s)^a * linear(s); Gauss-Jacobi with weight (T-s)^{2a}
    x, wj = special.roots_jacobi(3, 2 * a, 0.0)                     # weight (1-x)^{2a} on [-1, 1]
    s = r[N - 1] + h * (x + 1) / 2
    scale = (h / 2) ** (2 * a + 1)
    lin = alpha_h(hurst) * (F[-1][None] - ((T - s) / (a + 1))[:, None, None]
                            * ((F[-1] - F[-2]) / h)[None])
    gram += scale * np.einsum("q,qaj,qbj->ab", wj, lin, lin)
    jt = flow.jac[-1]
    return _sym(jt @ gram @ jt.T)


@dataclass
class MalliavinReport:
    c_matrix: np.ndarray
    m_matrix: np.ndarray
    lambda_min_c: float
    lambda_min_m: float
    quadrature_n: int
    hurst: float

    def to_dict(self) -> dict:
        return {"c_matrix": self.c_matrix.tolist(), "m_matrix": self.m_matrix.tolist(),
                "lambda_min_c": self.lambda_min_c, "lambda_min_m": self.lambda_min_m,
                "eigenvalues_c": np.linalg.eigvalsh(self.c_matrix).tolist(),
                "eigenvalues_m": np.linalg.eigvalsh(self.m_matrix).tolist(),
                "quadrature_n": self.quadrature_n, "hurst": self.hurst}


def malliavin_report(flow: FlowTriple, vfs: VectorFieldSystem, hurst: float) -> MalliavinReport:
    c = reduced_malliavin(flow, vfs)
    m = malliavin_matrix(flow, vfs, hurst)
    return MalliavinReport(c, m, float(np.linalg.eigvalsh(c)[0]), float(np.linalg.eigvalsh(m)[0]),
                           flow.grid.n_points, hurst)


def malliavin_derivative_first(flow: FlowTriple, vfs: VectorFieldSystem, s: float, t: float,
                               hurst: float, horizon: str = "t") -> np.ndarray:
    """D_s Z_t as an (n, d) matrix.

    Equal to c int_s^t (r-s)^{a-1} (J_{s,t}V(Z_s) - J_{r,t}V(Z_r)) dr
    + (2c/(1-2H)) (t-s)^a J_{s,t}V(Z_s) with c = (1/2 - H) alpha_H, which is
    evaluated through one integration by parts.  ``horizon="T"`` uses the
    final time T in place of t in the boundary term.
    """
    grid = flow.grid
    n, d = vfs.dim_state, vfs.dim_noise
    if s >= t:
        return np.zeros((n, d))
    if s < grid.t0:
        raise DomainError("s lies before the start of the flow")
    it = grid.index(t)
    sub = grid.sub(0, it)
    F = pulled_back_fields(flow, vfs)[:it + 1]
    a = hurst - 0.5
    kf = kernel_transform(F, sub, hurst, np.array([float(s)]))[0]
    out = flow.jac[it] @ kf
    if horizon == "T":
        f_s = np.stack([[np.interp(s, sub.times, F[:, i, j]) for j in range(d)] for i in range(n)])
        out = out + alpha_h(hurst) * ((grid.t1 - s) ** a - (t - s) ** a) * (flow.jac[it] @ f_s)
    elif horizon != "t":
        raise DomainError("horizon must be 't' or 'T'")
    return out


def least_squares_control(flow: FlowTriple, vfs: VectorFieldSystem, xi,
                          rank_tol: float = RANK_TOL, residual_tol: float = 1e-8) -> np.ndarray:
    """v(r) = V(Z_r)^T J_{0,r}^{-T} C^{-1} xi at the nodes, shape (N+1, d)."""
    xi = np.asarray(xi, dtype=float)
    c = reduced_malliavin(flow, vfs)
    lam = np.linalg.eigvalsh(c)
    if lam[0] <= rank_tol:
        raise NotControllableError(f"reduced Malliavin matrix is singular (lambda_min = {lam[0]:.3e})")
    F = pulled_back_fields(flow, vfs)
    y = linalg.solve(c, xi, assume_a="pos")
    v = np.einsum("kaj,a->kj", F, y)
    res = np.linalg.norm(control_image(flow, vfs, v) - xi)
    if res > residual_tol * max(np.linalg.norm(xi), 1e-300) and np.linalg.norm(xi) > 0:
        warnings.warn(f"least-squares control residual {res:.3e}", RuntimeWarning)
    return v


def control_image(flow: FlowTriple, vfs: VectorFieldSystem, v) -> np.ndarray:
    """A_T v = int_0^T J_{0,s}^{-1} V(Z_s) v(s) ds (trapezoid)."""
    F = pulled_back_fields(flow, vfs)
    w = _trapezoid_weights(F.shape[0], flow.grid.dt)
    return np.einsum("k,kaj,kj->a", w, F, np.asarray(v, dtype=float))


# ---------------------------------------------------------------- Lambda cutoff

def _square_weights(n: int, dt: float) -> np.ndarray:
    if n >= 3 and (n - 1) % 2 == 0:
        w = np.ones(n)
        w[1:-1:2] = 4
        w[2:-1:2] = 2
        return w * dt / 3
    return _trapezoid_weights(n, dt)


def log_lambda_cutoff(rough: RoughPath, beta: float, q: int) -> float:
    """log of int int_{s<t} (|dX_st|^{2q} + |antisym XX_st|^q) / |t-s|^{2 beta q} ds dt.

    Tensor Simpson (trapezoid for an odd number of cells) on the square,
    using the symmetry of the integrand and its zero limit on the diagonal.
    """
    if int(q) != q or q < 2 or q % 2:
        raise DomainError(f"q must be an even integer >= 2, got {q}")
    q = int(q)
    x = rough.values
    n = x.shape[0]
    dt = rough.grid.dt
    w = _square_weights(n, dt)
    logs, wts = [], []
    for i in range(n - 1):
        dx = x[i + 1:] - x[i]
        area = antisymmetric(rough.area_from(i)[1:])
        lag = (np.arange(1, n - i)) * dt
        with np.errstate(divide="ignore"):
            l1 = 2 * q * np.log(np.sqrt(np.sum(dx ** 2, axis=1)))
            l2 = q * np.log(np.sqrt(np.sum(area ** 2, axis=(1, 2))))
        lp = np.logaddexp(l1, l2) - 2 * beta * q * np.log(lag)
        logs.append(lp)
        wts.append(w[i] * w[i + 1:])
    lp = np.concatenate(logs)
    ww = np.concatenate(wts)
    if lp.size == 0 or not np.isfinite(lp.max()):
        return -np.inf
    m = lp.max()
    return float(m + np.log(np.sum(ww * np.exp(lp - m))))


def lambda_cutoff(rough: RoughPath, beta: float, q: int) -> float:
    return float(np.exp(log_lambda_cutoff(rough, beta, q)))


def lambda_norm_ratio(rough: RoughPath, beta: float, q: int, gamma: Optional[float] = None) -> float:
    """(||X||_g^2 + ||XX||_{2g}) / Lambda^{1/q}, evaluated in log space."""
    from .rough_core import area_norm, holder_seminorm
    g = rough.gamma if gamma is None else gamma
    num = holder_seminorm(rough, g) ** 2 + area_norm(rough, 2 * g)
    ll = log_lambda_cutoff(rough, beta, q)
    if num == 0:
        return 0.0
    return float(np.exp(np.log(num) - ll / q))


def _glue(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def chi(lam):
    """Smooth nonincreasing cutoff: 1 on (-inf, 1], 0 on [2, inf)."""
    lam = np.asarray(lam, dtype=float)
    a = _glue(2.0 - lam)
    b = _glue(lam - 1.0)
    out = a / (a + b)
    return out if out.ndim else float(out)


def cutoff_weight_value(lam: float, level: float) -> float:
    if level <= 0:
        raise DomainError("level must be positive")
    return float(chi(lam / level))


def cutoff_weight(rough: RoughPath, level: float, beta: float, q: int) -> float:
    """Psi_n = chi(Lambda / n)."""
    return cutoff_weight_value(lambda_cutoff(rough, beta, q), level)


# ---------------------------------------------------------------- eigen tail

def eigen_samples(system: str, hurst: float, T: float, n_samples: int, seed: int,
                  n_steps: int = 64, level: int = 2, z0=None, require_hormander: bool = True,
                  max_level: int = 4, **params) -> np.ndarray:
    vfs = builtin_system(system, **params) if isinstance(system, str) else system
    n = vfs.dim_state
    z0 = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float)
    rep = hormander_rank(vfs, z0, max_level)
    if not rep.satisfied and require_hormander:
        raise HypothesisViolation(
            f"Hoermander condition fails at z0 = {z0.tolist()}: rank {rep.rank} < {n} up to level {max_level}")
    grid = Grid(0.0, T, n_steps + 1)
    out = np.empty(n_samples)
    for k in range(n_samples):
        path = sample_fbm(hurst, grid, seed, vfs.dim_noise, replicate=k)
        rough = lift_fbm(path, level)
        flow = jacobian_flow(vfs, z0, rough)
        out[k] = np.linalg.eigvalsh(malliavin_matrix(flow, vfs, hurst))[0]
    return out


def eigen_tail_study(system, hurst: float, T: float, n_samples: int, epsilons: Sequence[float],
                     seed: int = 0, n_steps: int = 64, level: int = 2, z0=None,
                     require_hormander: bool = True, min_count: int = 5, **params) -> dict:
    """P(lambda_min(M_T) <= eps) with a log-log slope over the resolved range."""
    lam = eigen_samples(system, hurst, T, n_samples, seed, n_steps, level, z0, require_hormander, **params)
    rows = []
    for eps in epsilons:
        p = float(np.mean(lam <= eps))
        rows.append((float(eps), p, float(math.sqrt(p * (1 - p) / lam.size))))
    fit = [(math.log(e), math.log(p)) for e, p, _ in rows
           if p * lam.size >= min_count and p <= 0.5]
    slope = float("nan")
    if len(fit) >= 2:
        xs, ys = np.array(fit).T
        slope = float(np.polyfit(xs, ys, 1)[0])
    return {"rows": rows, "fitted_slope": slope, "fit_points": fit, "lambda_min": lam,
            "system": system if isinstance(system, str) else getattr(system, "name", "custom"),
            "hurst": hurst, "T": T, "n_samples": n_samples, "seed": seed}
