"""Rough integration, composition, the RDE solver and Jacobian flows.

Vector fields act on arrays with a leading batch shape: ``fields(z)`` maps
(..., n) to (..., n, d), column j being V_j.  Derivative conventions:

    fields_jac(z)[..., j, a, b]     = d V_j^a / d z_b
    fields_hess(z)[..., j, a, b, c] = d^2 V_j^a / d z_b d z_c
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from scipy.linalg import expm

from .errors import ConsistencyError, DomainError, ExplosionError
from .rough_core import ControlledPath, Grid, RoughPath, antisymmetric, remainder_norm

EXPLOSION_THRESHOLD = 1e12
TOL_JAC = 1e-8
H_FD = 1e-5


def _lambdify(syms, exprs, shape):
    """Batch-aware numpy evaluation of a nested list of sympy expressions."""
    arr = np.empty(int(np.prod(shape)), dtype=object)
    arr[:] = [sp.sympify(e) for e in np.array(exprs, dtype=object).reshape(-1)]
    flat = list(arr)
    fn = sp.lambdify(syms, flat, "numpy")
    const = [e.is_number for e in flat]

    def f(z):
        z = np.asarray(z, dtype=float)
        lead = z.shape[:-1]
        out = fn(*[z[..., i] for i in range(z.shape[-1])])
        cols = [np.broadcast_to(np.asarray(o, dtype=float), lead) if c else np.asarray(o, dtype=float)
                for o, c in zip(out, const)]
        return np.stack(cols, axis=-1).reshape(lead + tuple(shape))

    return f


@dataclass(frozen=True)
class VectorFieldSystem:
    dim_state: int
    dim_noise: int
    drift: Callable
    drift_jac: Callable
    fields: Callable
    fields_jac: Callable
    fields_hess: Optional[Callable] = None
    name: str = "custom"
    symbolic: Optional[tuple] = field(default=None, repr=False)
    h_fd: float = H_FD

    @classmethod
    def from_sympy(cls, syms: Sequence, drift: Sequence, fields: Sequence[Sequence],
                   name: str = "symbolic") -> "VectorFieldSystem":
        """Build from sympy expressions; ``fields[j]`` is the n-vector V_{j+1}."""
        syms = list(syms)
        n = len(syms)
        d = len(fields)
        drift = [sp.sympify(e) for e in drift]
        fields = [[sp.sympify(e) for e in v] for v in fields]
        if len(drift) != n or any(len(v) != n for v in fields):
            raise DomainError("every field needs one expression per state coordinate")
        vmat = [[fields[j][a] for j in range(d)] for a in range(n)]                 # n x d
        djac = [[sp.diff(drift[a], syms[b]) for b in range(n)] for a in range(n)]
        fjac = [[[sp.diff(fields[j][a], syms[b]) for b in range(n)] for a in range(n)] for j in range(d)]
        fhess = [[[[sp.diff(fields[j][a], syms[b], syms[c]) for c in range(n)] for b in range(n)]
                  for a in range(n)] for j in range(d)]
        return cls(
            n, d,
            _lambdify(syms, drift, (n,)),
            _lambdify(syms, djac, (n, n)),
            _lambdify(syms, vmat, (n, d)),
            _lambdify(syms, fjac, (d, n, n)),
            _lambdify(syms, fhess, (d, n, n, n)),
            name=name,
            symbolic=(tuple(syms), tuple(drift), tuple(tuple(v) for v in fields)),
        )

    def hess(self, z):
        if self.fields_hess is not None:
            return self.fields_hess(z)
        z = np.asarray(z, dtype=float)
        n = self.dim_state
        out = []
        for c in range(n):
            e = np.zeros(n)
            e[c] = self.h_fd
            out.append((self.fields_jac(z + e) - self.fields_jac(z - e)) / (2 * self.h_fd))
        return np.stack(out, axis=-1)

    def field_list(self):
        """Evaluators (f, Df) for V_0, V_1, ..., V_d as separate fields."""
        out = [(self.drift, self.drift_jac)]
        for j in range(self.dim_noise):
            out.append((lambda z, j=j: self.fields(z)[..., :, j],
                        lambda z, j=j: self.fields_jac(z)[..., j, :, :]))
        return out

    def derivative_defect(self, points) -> float:
        """Max discrepancy between supplied and central-difference Jacobians."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = self.dim_state
        worst = 0.0
        for z in pts:
            for f, df in self.field_list():
                fd = np.empty((n, n))
                for b in range(n):
                    e = np.zeros(n)
                    e[b] = self.h_fd
                    fd[:, b] = (f(z + e) - f(z - e)) / (2 * self.h_fd)
                worst = max(worst, float(np.max(np.abs(fd - df(z)))))
        return worst

    def scaled(self, c: float) -> "VectorFieldSystem":
        """Same drift, driving fields multiplied by c."""
        fh = self.fields_hess
        return VectorFieldSystem(
            self.dim_state, self.dim_noise, self.drift, self.drift_jac,
            lambda z: c * self.fields(z), lambda z: c * self.fields_jac(z),
            None if fh is None else (lambda z: c * fh(z)), name=f"{self.name}*{c}")


@dataclass(frozen=True)
class FlowTriple:
    grid: Grid
    z: np.ndarray
    jac: np.ndarray
    jac_inv: np.ndarray

    def jac_between(self, i: int, j: int) -> np.ndarray:
        """J_{s,t} = J_{0,t} J_{0,s}^{-1} for node indices s=i, t=j."""
        return self.jac[j] @ self.jac_inv[i]

    def inverse_defect(self) -> np.ndarray:
        n = self.jac.shape[1]
        prod = np.einsum("kab,kbc->kac", self.jac, self.jac_inv)
        return np.linalg.norm(prod - np.eye(n), axis=(1, 2))


# ---------------------------------------------------------------- integration

def rough_integral(controlled: ControlledPath, rough: Optional[RoughPath] = None) -> ControlledPath:
    """int_0^t Z dX by compensated Riemann sums Z_s dX + Z'_s : XX^T.

    The integrand has values of shape (n, *shape, d); the result has values
    (n, *shape) and Gubinelli derivative equal to the integrand.
    """
    rough = controlled.base if rough is None else rough
    if not controlled.grid.same_as(rough.grid):
        raise DomainError("integrand and rough path live on different grids")
    z, zp = controlled.z_values, controlled.derivative
    d = rough.dim
    if z.shape[-1] != d:
        raise DomainError(f"integrand trailing dimension {z.shape[-1]} != d = {d}")
    dx = np.diff(rough.values, axis=0)
    first = np.einsum("n...d,nd->n...", z[:-1], dx)
    second = np.einsum("n...ij,nji->n...", zp[:-1], rough.step_area)
    incr = first + second
    vals = np.concatenate([np.zeros((1,) + incr.shape[1:]), np.cumsum(incr, axis=0)])
    deriv = z
    if vals.ndim == 1:
        vals = vals[:, None]
        deriv = z[:, None, :]
    return ControlledPath(rough, vals, deriv)


def compose(psi: Callable, dpsi: Callable, controlled: ControlledPath) -> ControlledPath:
    """(psi(Y), D psi(Y) Y').  ``psi`` maps (n, m) -> (n, k), ``dpsi`` -> (n, k, m)."""
    y = controlled.z_values.reshape(controlled.z_values.shape[0], -1)
    yp = controlled.derivative.reshape(y.shape + (controlled.base.dim,))
    val = np.asarray(psi(y), dtype=float)
    if val.ndim == 1:
        val = val[:, None]
    jac = np.asarray(dpsi(y), dtype=float).reshape(val.shape + (y.shape[1],))
    return ControlledPath(controlled.base, val, np.einsum("nkm,nmd->nkd", jac, yp))


# ---------------------------------------------------------------- solver

def _check_dims(vfs: VectorFieldSystem, z0, d):
    z0 = np.asarray(z0, dtype=float)
    if z0.shape[-1] != vfs.dim_state:
        raise DomainError(f"initial state has dimension {z0.shape[-1]}, system has {vfs.dim_state}")
    if d != vfs.dim_noise:
        raise DomainError(f"rough path has dimension {d}, system has {vfs.dim_noise} driving fields")
    return z0


def davie_steps(vfs: VectorFieldSystem, z0, increments, areas, dt: float, t0: float = 0.0):
    """Batched Davie scheme.

    ``increments`` has shape (N, ..., d) and ``areas`` (N, ..., d, d); the
    batch shape must broadcast with that of ``z0``.  Returns (N+1, ..., n).
    """
    z = np.array(z0, dtype=float)
    n_steps = increments.shape[0]
    out = np.empty((n_steps + 1,) + np.broadcast_shapes(z.shape, increments.shape[1:-1] + (vfs.dim_state,)))
    out[0] = z
    for k in range(n_steps):
        v = vfs.fields(z)
        dv = vfs.fields_jac(z)
        z = (z + vfs.drift(z) * dt + np.einsum("...ad,...d->...a", v, increments[k])
             + np.einsum("...jab,...bi,...ij->...a", dv, v, areas[k]))
        out[k + 1] = z
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > EXPLOSION_THRESHOLD:
            raise ExplosionError(
                f"state left the finite region at t = {t0 + (k + 1) * dt:.6g}", time=t0 + (k + 1) * dt)
    return out


def solve_rde(vfs: VectorFieldSystem, z0, rough: RoughPath, check: bool = True) -> ControlledPath:
    """Solve dZ = V_0(Z) dt + V(Z) dX with the one-step Davie scheme

    Z <- Z + V_0 dt + V_i dX^i + DV_j V_i XX^{ij}.

    Returns (Z, V(Z)).  With ``check`` the remainder norm of the solution
    is evaluated and must be finite.
    """
    z0 = _check_dims(vfs, z0, rough.dim)
    dx = np.diff(rough.values, axis=0)
    z = davie_steps(vfs, z0, dx, rough.step_area, rough.grid.dt, rough.grid.t0)
    sol = ControlledPath(rough, z, vfs.fields(z))
    if check:
        r = remainder_norm(sol, 2 * rough.gamma)
        if not np.isfinite(r):
            raise ExplosionError("solution remainder is not finite")
    return sol


def _magnus_generator(vfs, z, dx, area, dt):
    """Second-order log of the one-step flow of dJ = DV(Z) J dX."""
    v = vfs.fields(z)
    dv = vfs.fields_jac(z)
    hs = vfs.hess(z)
    anti = antisymmetric(area)
    return (vfs.drift_jac(z) * dt
            + np.einsum("...jab,...j->...ab", dv, dx)
            + np.einsum("...jabc,...ci,...ij->...ab", hs, v, area)
            + np.einsum("...jab,...ibc,...ij->...ac", dv, dv, anti))


def jacobian_flow(vfs: VectorFieldSystem, z0, rough: RoughPath, tol_jac: float = TOL_JAC) -> FlowTriple:
    """Trajectory of (Z, J_{0,t}, J_{0,t}^{-1}).

    Z follows the Davie step.  J and J^{-1} follow the matrix equations
    dJ = DV(Z) J dX, dJ^{-1} = -J^{-1} DV(Z) dX at the same (second) order,
    written in exponential form J <- exp(O) J, J^{-1} <- J^{-1} exp(-O)
    so that J J^{-1} = I is preserved up to rounding at every step.
    """
    z0 = _check_dims(vfs, z0, rough.dim)
    dx = np.diff(rough.values, axis=0)
    dt = rough.grid.dt
    z = davie_steps(vfs, z0, dx, rough.step_area, dt, rough.grid.t0)
    n = vfs.dim_state
    omega = _magnus_generator(vfs, z[:-1], dx, rough.step_area, dt)
    fwd = expm(omega)
    bwd = expm(-omega)
    N = dx.shape[0]
    jac = np.empty((N + 1, n, n))
    inv = np.empty((N + 1, n, n))
    jac[0] = inv[0] = np.eye(n)
    for k in range(N):
        jac[k + 1] = fwd[k] @ jac[k]
        inv[k + 1] = inv[k] @ bwd[k]
    flow = FlowTriple(rough.grid, z, jac, inv)
    if not np.all(np.isfinite(jac)) or not np.all(np.isfinite(inv)):
        raise ExplosionError("Jacobian flow is not finite")
    defect = flow.inverse_defect()
    if defect.max() > tol_jac:
        k = int(np.argmax(defect))
        raise ConsistencyError(
            f"|J J^-1 - I| = {defect[k]:.3e} > {tol_jac:g} at t = {rough.grid.times[k]:.6g}")
    return flow


# ---------------------------------------------------------------- built-in systems

def ou_system(A, C) -> VectorFieldSystem:
    """dx = A x dt + C dX (additive noise)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    n, d = C.shape
    if A.shape != (n, n):
        raise DomainError("A must be n x n and C n x d")
    x = sp.symbols(f"x0:{n}")
    drift = [sum(sp.Float(A[a, b]) * x[b] for b in range(n)) for a in range(n)]
    fields = [[sp.Float(C[a, j]) for a in range(n)] for j in range(d)]
    return VectorFieldSystem.from_sympy(x, drift, fields, name="ou")


def levy_system(d: int = 2) -> VectorFieldSystem:
    """Paths plus antisymmetric areas: n = d + d(d-1)/2.

    V_j = e_j + sum_{i<j} f_ij x_i - sum_{i>j} f_ji x_i with f_ij the unit
    vector of the (i, j) area coordinate, so [V_j, V_k] = 2 f_jk.
    """
    if d < 2:
        raise DomainError("the area system needs d >= 2")
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    n = d + len(pairs)
    x = sp.symbols(f"x0:{n}")
    fields = []
    for j in range(d):
        v = [sp.Integer(0)] * n
        v[j] = sp.Integer(1)
        for p, (a, b) in enumerate(pairs):
            if b == j:
                v[d + p] += x[a]
            elif a == j:
                v[d + p] -= x[b]
        fields.append(v)
    return VectorFieldSystem.from_sympy(x, [sp.Integer(0)] * n, fields, name="levy")


def levy_pairs(d: int):
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def langevin_potential(kappa: float = 1.0, bump: float = 0.5, width: float = 1.0):
    """V(q) = kappa q^2/2 + bump exp(-q^2 / (2 width^2)) as a sympy lambda."""
    return lambda q: sp.Rational(1, 2) * kappa * q ** 2 + bump * sp.exp(-q ** 2 / (2 * width ** 2))


def langevin_system(kappa: float = 1.0, bump: float = 0.5, width: float = 1.0,
                    friction: float = 1.0, noise: float = 1.0) -> VectorFieldSystem:
    """dq = p dt, dp = -V'(q) dt - friction p dt + noise dX (state (q, p))."""
    q, p = sp.symbols("q p")
    V = langevin_potential(kappa, bump, width)(q)
    drift = [p, -sp.diff(V, q) - friction * p]
    return VectorFieldSystem.from_sympy((q, p), drift, [[sp.Integer(0), sp.Float(noise)]],
                                        name="langevin")


def builtin_system(name: str, **params) -> VectorFieldSystem:
    if name == "ou":
        A = params.get("A", [[-0.1, 1.0], [-1.0, -1.0]])
        C = params.get("C", [[0.0], [1.0]])
        return ou_system(A, C)
    if name == "levy":
        return levy_system(int(params.get("d", 2)))
    if name == "langevin":
        keys = ("kappa", "bump", "width", "friction", "noise")
        return langevin_system(**{k: float(params[k]) for k in keys if k in params})
    raise DomainError(f"unknown built-in system {name!r}")


# ---------------------------------------------------------------- polynomial text format

def parse_polynomial_system(text: str) -> VectorFieldSystem:
    """Polynomial vector fields from text.

    Format::

        # polysystem n=<n> d=<d>
        <field> <component> <coefficient> <e_1> ... <e_n>

    one monomial per line; field 0 is the drift, fields 1..d drive.
    Lines starting with '#' after the header are comments.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# polysystem"):
        raise DomainError("missing '# polysystem' header")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    try:
        n, d = int(meta["n"]), int(meta["d"])
    except (KeyError, ValueError) as exc:
        raise DomainError(f"bad polysystem header {lines[0]!r}") from exc
    x = sp.symbols(f"x0:{n}")
    exprs = [[sp.Integer(0)] * n for _ in range(d + 1)]
    for ln in lines[1:]:
        if ln.startswith("#"):
            continue
        tok = ln.split()
        if len(tok) != 3 + n:
            raise DomainError(f"monomial line needs {3 + n} entries: {ln!r}")
        j, a = int(tok[0]), int(tok[1])
        if not (0 <= j <= d and 0 <= a < n):
            raise DomainError(f"field/component out of range: {ln!r}")
        coef = sp.Float(float(tok[2]))
        mono = sp.Integer(1)
        for b, e in enumerate(tok[3:]):
            e = int(e)
            if e < 0:
                raise DomainError("negative exponent")
            mono *= x[b] ** e
        exprs[j][a] += coef * mono
    return VectorFieldSystem.from_sympy(x, exprs[0], exprs[1:], name="polynomial")


def load_system(spec: str, **params) -> VectorFieldSystem:
    """A built-in name or a path to a polynomial system file."""
    if spec in ("ou", "levy", "langevin"):
        return builtin_system(spec, **params)
    try:
        with open(spec) as fh:
            return parse_polynomial_system(fh.read())
    except FileNotFoundError as exc:
        raise DomainError(f"no built-in system or file named {spec!r}") from exc
