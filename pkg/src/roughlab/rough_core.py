"""Discrete rough paths and controlled paths on uniform grids.

A rough path stores node values X_{t_i} and per-step second-level
increments X_{t_i t_{i+1}}; the two-parameter tensor X_{st} for arbitrary
node pairs is reconstructed with Chen's relation

    X_{st} = X_{su} + X_{ut} + dX_{su} (x) dX_{ut}.

All magnitudes are Euclidean for vectors and Frobenius for matrices and
tensors.  Continuous-time suprema are replaced by suprema over node pairs,
which can only under-estimate the continuous norms.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DomainError

# exact lifts are reconstructed through cumulative sums; 1e-12 is the
# absolute floor used for O(1) paths, see chen_tolerance
EXACT_CHEN_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    t0: float
    t1: float
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise DomainError(f"grid needs n_points >= 2, got {self.n_points}")
        if not self.t1 > self.t0:
            raise DomainError(f"grid needs t1 > t0, got [{self.t0}, {self.t1}]")
        object.__setattr__(self, "n_points", int(self.n_points))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.n_points - 1)

    @property
    def n_steps(self) -> int:
        return self.n_points - 1

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.n_points)

    def index(self, t: float) -> int:
        """Index of the node at time t (must lie on the grid)."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if i < 0 or i >= self.n_points or abs(x - i) > 1e-9 * max(1.0, abs(x)):
            raise IndexError(f"time {t} is not a node of {self}")
        return i

    def refine(self, level: int) -> "Grid":
        if level < 0:
            raise DomainError("refinement level must be >= 0")
        return Grid(self.t0, self.t1, self.n_steps * 2**level + 1)

    def sub(self, i0: int, i1: int) -> "Grid":
        """Grid of nodes i0..i1 (inclusive)."""
        if not 0 <= i0 < i1 < self.n_points:
            raise DomainError(f"bad node range [{i0}, {i1}]")
        t = self.times
        return Grid(t[i0], t[i1], i1 - i0 + 1)

    def same_as(self, other: "Grid") -> bool:
        return (self.n_points == other.n_points
                and np.isclose(self.t0, other.t0, rtol=0, atol=1e-12)
                and np.isclose(self.t1, other.t1, rtol=0, atol=1e-12))


@dataclass(frozen=True)
class Path:
    """A path sampled at the nodes of a grid.

    ``values`` has shape (n_points, d).  ``hurst`` and ``seed`` are set by
    the fBm sampler so that the path can later be refined jointly.
    """

    grid: Grid
    values: np.ndarray
    hurst: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_points:
            raise DomainError(
                f"values of shape {v.shape} do not match {self.grid.n_points} nodes")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "Path") -> "Path":
        _check_grid(self.grid, other.grid)
        return Path(self.grid, self.values + other.values)

    def scaled(self, c: float) -> "Path":
        return Path(self.grid, c * self.values)


PathLike = Union[Path, "RoughPath"]


def as_path(obj, grid: Optional[Grid] = None) -> Path:
    if isinstance(obj, Path):
        return obj
    if isinstance(obj, RoughPath):
        return Path(obj.grid, obj.values)
    if grid is None:
        raise DomainError("a grid is needed to interpret a raw array as a path")
    return Path(grid, obj)


def _check_grid(a: Grid, b: Grid):
    if not a.same_as(b):
        raise DomainError(f"grid mismatch: {a} vs {b}")


def _flat(values: np.ndarray) -> np.ndarray:
    return values.reshape(values.shape[0], -1)


@dataclass(frozen=True)
class RoughPath:
    """Discrete rough path (X, XX).

    ``step_area[k]`` is the d x d tensor XX_{t_k t_{k+1}} with the
    convention XX^{ij}_{st} = int_s^t (X^i_r - X^i_s) dX^j_r.
    ``pair_area`` optionally holds an explicitly supplied two-parameter
    tensor of shape (n, n, d, d); when absent it is reconstructed by Chen.
    """

    grid: Grid
    values: np.ndarray
    step_area: np.ndarray
    gamma: float = 0.5
    pair_area: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        n, d = v.shape
        if n != self.grid.n_points:
            raise DomainError("values do not match the grid")
        a = np.asarray(self.step_area, dtype=float)
        if a.shape != (n - 1, d, d):
            raise DomainError(f"step_area must have shape {(n - 1, d, d)}, got {a.shape}")
        if not 1 / 3 < self.gamma <= 1:
            raise DomainError(f"gamma must lie in (1/3, 1], got {self.gamma}")
        v = v.copy()
        a = a.copy()
        v.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "step_area", a)
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.pair_area is not None:
            p = np.array(self.pair_area, dtype=float)
            if p.shape != (n, n, d, d):
                raise DomainError("pair_area must have shape (n, n, d, d)")
            p.flags.writeable = False
            object.__setattr__(self, "pair_area", p)
        # cumulative sums for Chen reconstruction
        dx = np.diff(v, axis=0)
        s = np.zeros((n, d, d))
        s[1:] = np.cumsum(a, axis=0)
        p_ = np.zeros((n, d, d))
        p_[1:] = np.cumsum(v[:-1, :, None] * dx[:, None, :], axis=0)
        object.__setattr__(self, "_cum_area", s)
        object.__setattr__(self, "_cum_cross", p_)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def path(self) -> Path:
        return Path(self.grid, self.values)

    def increment(self, i: int, j: int) -> np.ndarray:
        return self.values[j] - self.values[i]

    def area(self, i: int, j: int) -> np.ndarray:
        """XX_{t_i t_j} (for i > j the Chen-consistent extension is used)."""
        if self.pair_area is not None:
            return self.pair_area[i, j].copy()
        x = self.values
        return ((self._cum_area[j] - self._cum_area[i])
                + (self._cum_cross[j] - self._cum_cross[i])
                - np.outer(x[i], x[j] - x[i]))

    def area_lag(self, lag: int) -> np.ndarray:
        """All XX_{t_i t_{i+lag}}, shape (n - lag, d, d)."""
        if self.pair_area is not None:
            idx = np.arange(self.grid.n_points - lag)
            return self.pair_area[idx, idx + lag]
        x = self.values
        ca, cc = self._cum_area, self._cum_cross
        return ((ca[lag:] - ca[:-lag]) + (cc[lag:] - cc[:-lag])
                - x[:-lag, :, None] * (x[lag:] - x[:-lag])[:, None, :])

    def area_from(self, i: int) -> np.ndarray:
        """XX_{t_i t_j} for all j >= i, shape (n - i, d, d)."""
        if self.pair_area is not None:
            return self.pair_area[i, i:]
        x = self.values
        return ((self._cum_area[i:] - self._cum_area[i])
                + (self._cum_cross[i:] - self._cum_cross[i])
                - x[i][None, :, None] * (x[i:] - x[i])[:, None, :])

    def area_matrix(self) -> np.ndarray:
        """Full (n, n, d, d) tensor, upper triangle i <= j meaningful."""
        if self.pair_area is not None:
            return self.pair_area.copy()
        n, d = self.values.shape
        out = np.zeros((n, n, d, d))
        for i in range(n):
            out[i, i:] = self.area_from(i)
        return out

    def restrict(self, i0: int, i1: int) -> "RoughPath":
        """The rough path over nodes i0..i1."""
        pa = None
        if self.pair_area is not None:
            pa = self.pair_area[i0:i1 + 1, i0:i1 + 1]
        return RoughPath(self.grid.sub(i0, i1), self.values[i0:i1 + 1],
                         self.step_area[i0:i1], self.gamma, pa)

    def with_values(self, values=None, step_area=None, gamma=None) -> "RoughPath":
        return RoughPath(self.grid,
                         self.values if values is None else values,
                         self.step_area if step_area is None else step_area,
                         self.gamma if gamma is None else gamma)

    def with_explicit_area(self) -> "RoughPath":
        """Copy that carries the reconstructed two-parameter tensor explicitly."""
        return RoughPath(self.grid, self.values, self.step_area, self.gamma,
                         self.area_matrix())

    def coarsen(self, factor: int) -> "RoughPath":
        """Keep every ``factor``-th node; per-step areas combined by Chen."""
        n = self.grid.n_steps
        if factor < 1 or n % factor:
            raise DomainError(f"cannot coarsen {n} steps by {factor}")
        idx = np.arange(0, n + 1, factor)
        x = self.values
        area = ((self._cum_area[idx[1:]] - self._cum_area[idx[:-1]])
                + (self._cum_cross[idx[1:]] - self._cum_cross[idx[:-1]])
                - x[idx[:-1], :, None] * (x[idx[1:]] - x[idx[:-1]])[:, None, :])
        return RoughPath(Grid(self.grid.t0, self.grid.t1, len(idx)), x[idx], area, self.gamma)


@dataclass(frozen=True)
class ControlledPath:
    """A pair (Z, Z') controlled by ``base``.

    ``z_values`` has shape (n, *shape) and ``derivative`` shape
    (n, *shape, d): Z'_t maps increments of X to increments of Z.
    """

    base: RoughPath
    z_values: np.ndarray
    derivative: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z_values, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        zp = np.asarray(self.derivative, dtype=float)
        n, d = self.base.values.shape
        if z.shape[0] != n:
            raise DomainError("controlled path and base rough path have different grids")
        if zp.ndim == z.ndim and d == 1 and zp.shape == z.shape:
            zp = zp[..., None]
        if zp.shape != z.shape + (d,):
            raise DomainError(
                f"Gubinelli derivative must have shape {z.shape + (d,)}, got {zp.shape}")
        z = z.copy()
        zp = zp.copy()
        z.flags.writeable = False
        zp.flags.writeable = False
        object.__setattr__(self, "z_values", z)
        object.__setattr__(self, "derivative", zp)

    @property
    def grid(self) -> Grid:
        return self.base.grid

    def remainder_lag(self, lag: int) -> np.ndarray:
        z, zp, x = self.z_values, self.derivative, self.base.values
        dz = z[lag:] - z[:-lag]
        dx = x[lag:] - x[:-lag]
        return dz - np.einsum("n...d,nd->n...", zp[:-lag], dx)


# ---------------------------------------------------------------- norms

def _values(path) -> np.ndarray:
    if isinstance(path, (Path, RoughPath)):
        return path.values
    return np.asarray(path, dtype=float)


def _grid(path, grid):
    if isinstance(path, (Path, RoughPath)):
        return path.grid
    if grid is None:
        raise DomainError("grid required")
    return grid


def increment(path, s: int, t: int) -> np.ndarray:
    """X_t - X_s for node indices s, t."""
    v = _values(path)
    n = v.shape[0]
    for i in (s, t):
        if not -n <= i < n or int(i) != i:
            raise IndexError(f"node {i} outside grid of {n} nodes")
    return v[t] - v[s]


def lag_sup(values: np.ndarray, dt: float, exponent: float, lag_fn=None) -> float:
    """sup over node pairs of |q_{st}| / |t-s|^exponent.

    ``lag_fn(lag)`` returns the two-parameter quantity for all pairs at a
    given lag; by default the increment of ``values``.
    """
    n = values.shape[0]
    best = 0.0
    flat = _flat(values) if lag_fn is None else None
    for lag in range(1, n):
        if lag_fn is None:
            q = flat[lag:] - flat[:-lag]
        else:
            q = lag_fn(lag).reshape(n - lag, -1)
        m = np.sqrt(np.max(np.einsum("ij,ij->i", q, q)))
        best = max(best, m / (lag * dt) ** exponent)
    return float(best)


def holder_seminorm(path, gamma: float, grid: Optional[Grid] = None) -> float:
    """Discrete gamma-Hoelder seminorm sup |f_t - f_s| / |t-s|^gamma."""
    if not 0 < gamma <= 1:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    v = _values(path)
    if v.shape[0] < 2:
        raise DomainError("need at least two nodes")
    g = _grid(path, grid)
    return lag_sup(v, g.dt, gamma)


def sup_norm(values) -> float:
    v = _flat(np.asarray(_values(values), dtype=float))
    return float(np.sqrt(np.max(np.einsum("ij,ij->i", v, v))))


def c_gamma_norm(path, gamma: float, grid: Optional[Grid] = None) -> float:
    """||f||_inf + ||f||_gamma."""
    return sup_norm(path) + holder_seminorm(path, gamma, grid)


def variation_holder_norm(path, gamma: float, grid: Optional[Grid] = None) -> float:
    """Smallest C with var_{[s,t]}(h) <= C |t-s|^gamma (piecewise-linear h)."""
    v = _flat(_values(path))
    g = _grid(path, grid)
    steps = np.sqrt(np.sum(np.diff(v, axis=0) ** 2, axis=1))
    var = np.concatenate([[0.0], np.cumsum(steps)])
    return lag_sup(var[:, None], g.dt, gamma)


def area_norm(rough: RoughPath, two_gamma: float) -> float:
    """Discrete sup |XX_{st}| / |t-s|^{2 gamma} (Frobenius)."""
    return lag_sup(rough.values, rough.grid.dt, two_gamma, rough.area_lag)


def rough_path_norm(rough: RoughPath, gamma: Optional[float] = None) -> float:
    """||X||_gamma + ||XX||_{2 gamma}."""
    g = rough.gamma if gamma is None else gamma
    return holder_seminorm(rough, g) + area_norm(rough, 2 * g)


def rough_distance(a: RoughPath, b: RoughPath, gamma: Optional[float] = None) -> float:
    """||X - Y||_gamma + ||XX - YY||_{2 gamma}."""
    _check_grid(a.grid, b.grid)
    g = a.gamma if gamma is None else gamma
    dx = lag_sup(a.values - b.values, a.grid.dt, g)
    da = lag_sup(a.values, a.grid.dt, 2 * g, lambda k: a.area_lag(k) - b.area_lag(k))
    return dx + da


def chen_defect(rough: RoughPath, max_nodes: int = 400) -> float:
    """max over node triples s<u<t of |XX_st - XX_ut - XX_su - dX_su (x) dX_ut|.

    For more than ``max_nodes`` nodes the scan runs over an evenly strided
    subset of nodes (the triples are still node triples of the grid).
    """
    n = rough.grid.n_points
    idx = np.arange(n)
    if n > max_nodes:
        idx = np.unique(np.linspace(0, n - 1, max_nodes).round().astype(int))
    if rough.pair_area is not None:
        full = rough.pair_area[np.ix_(idx, idx)]
    else:
        full = np.zeros((len(idx), len(idx), rough.dim, rough.dim))
        for a, i in enumerate(idx):
            full[a, a:] = rough.area_from(i)[idx[a:] - i]
    x = rough.values[idx]
    worst = 0.0
    m = len(idx)
    for u in range(1, m - 1):
        a_st = full[:u, u + 1:]
        a_ut = full[u, u + 1:][None]
        a_su = full[:u, u][:, None]
        dsu = (x[u] - x[:u])[:, None, :, None]
        dut = (x[u + 1:] - x[u])[None, :, None, :]
        err = a_st - a_ut - a_su - dsu * dut
        worst = max(worst, float(np.sqrt(np.max(np.sum(err ** 2, axis=(2, 3))))))
    return worst


def chen_tolerance(rough: RoughPath) -> float:
    """Float-error tolerance for Chen-reconstructed lifts.

    Reconstruction uses cumulative sums of size up to n |X|^2, so the
    tolerance scales with the path magnitude and the number of steps.
    """
    scale = max(1.0, sup_norm(rough.values)) ** 2
    return EXACT_CHEN_TOL * scale * max(1.0, rough.grid.n_steps / 100.0)


def symmetry_defect(rough: RoughPath, max_nodes: int = 400) -> float:
    """max |Sym XX_st - 1/2 dX_st (x) dX_st| over node pairs."""
    n = rough.grid.n_points
    stride = max(1, n // max_nodes)
    worst = 0.0
    x = rough.values
    for i in range(0, n, stride):
        a = rough.area_from(i)
        dx = x[i:] - x[i]
        sym = 0.5 * (a + np.swapaxes(a, 1, 2))
        err = sym - 0.5 * dx[:, :, None] * dx[:, None, :]
        worst = max(worst, float(np.sqrt(np.max(np.sum(err ** 2, axis=(1, 2))))))
    return worst


def antisymmetric(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------- lifts

def pl_step_area(dx: np.ndarray) -> np.ndarray:
    """Per-step area of a straight segment: 1/2 dx (x) dx."""
    return 0.5 * dx[:, :, None] * dx[:, None, :]


def lift_smooth(path, grid: Optional[Grid] = None, gamma: float = 0.5) -> RoughPath:
    """Canonical lift of the piecewise-linear interpolant of a sampled path."""
    p = as_path(path, grid)
    dx = np.diff(p.values, axis=0)
    return RoughPath(p.grid, p.values, pl_step_area(dx), gamma)


def lift_fine_pl(fine_values: np.ndarray, coarse_grid: Grid, factor: int,
                 gamma: float) -> RoughPath:
    """Lift a path given on a grid ``factor`` times finer than ``coarse_grid``.

    Piecewise-linear areas on the fine grid are combined by Chen into
    per-step areas of the coarse grid.
    """
    v = np.asarray(fine_values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] != coarse_grid.n_steps * factor + 1:
        raise DomainError("fine values do not match coarse grid and factor")
    fine = lift_smooth(v, Grid(coarse_grid.t0, coarse_grid.t1, v.shape[0]), gamma)
    return fine.coarsen(factor) if factor > 1 else fine


# ---------------------------------------------------------------- controlled paths

def remainder(controlled: ControlledPath) -> np.ndarray:
    """R^Z_{st} = dZ_st - Z'_s dX_st for all node pairs.

    Returned as an array of shape (n, n, *shape); entry [i, j] for i <= j.
    """
    n = controlled.grid.n_points
    shape = controlled.z_values.shape[1:]
    out = np.zeros((n, n) + shape)
    for lag in range(1, n):
        r = controlled.remainder_lag(lag)
        idx = np.arange(n - lag)
        out[idx, idx + lag] = r
    return out


def remainder_norm(controlled: ControlledPath, two_gamma: float) -> float:
    g = controlled.grid
    return lag_sup(controlled.z_values, g.dt, two_gamma, controlled.remainder_lag)


def controlled_norm(controlled: ControlledPath, gamma: Optional[float] = None) -> float:
    """|Z(0)| + ||Z'||_inf + ||Z'||_gamma + ||R^Z||_{2 gamma}."""
    g = controlled.base.gamma if gamma is None else gamma
    z0 = float(np.linalg.norm(controlled.z_values[0]))
    zp = controlled.derivative
    dt = controlled.grid.dt
    return (z0 + sup_norm(zp) + lag_sup(zp, dt, g)
            + remainder_norm(controlled, 2 * g))


# ---------------------------------------------------------------- translation

def translate(rough: RoughPath, h) -> RoughPath:
    """Translation of a rough path by a piecewise-linear path h.

    Y = X + h, and per step
    YY = XX + int dX (x) dh + int dh (x) dX + int dh (x) dh,
    where the cross integrals over one step are 1/2 dX (x) dh and
    1/2 dh (x) dX for linear h; longer intervals follow by Chen.
    """
    hp = as_path(h, rough.grid)
    _check_grid(rough.grid, hp.grid)
    if hp.dim != rough.dim:
        raise DomainError("translation path has wrong dimension")
    dx = np.diff(rough.values, axis=0)
    dh = np.diff(hp.values, axis=0)
    cross = 0.5 * (dx[:, :, None] * dh[:, None, :] + dh[:, :, None] * dx[:, None, :])
    area = rough.step_area + cross + pl_step_area(dh)
    return RoughPath(rough.grid, rough.values + hp.values, area, rough.gamma)


# ---------------------------------------------------------------- text format

def write_roughpath(rough: RoughPath, dest) -> None:
    """Write the columnar text format.

    Header ``# roughpath d=<d> n=<n> gamma=<g>``, then n lines ``t x_1..x_d``,
    then n-1 lines of d*d per-step area entries in row-major order.
    """
    n, d = rough.values.shape
    buf = io.StringIO()
    buf.write(f"# roughpath d={d} n={n} gamma={rough.gamma!r}\n")
    t = rough.grid.times
    for i in range(n):
        buf.write(" ".join(repr(float(v)) for v in (t[i], *rough.values[i])) + "\n")
    for k in range(n - 1):
        buf.write(" ".join(repr(float(v)) for v in rough.step_area[k].ravel()) + "\n")
    text = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w") as fh:
            fh.write(text)


def read_roughpath(src) -> RoughPath:
    if hasattr(src, "read"):
        lines = src.read().splitlines()
    else:
        with open(src) as fh:
            lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# roughpath"):
        raise DomainError("missing '# roughpath' header")
    meta = {}
    for tok in lines[0].split()[2:]:
        k, _, v = tok.partition("=")
        meta[k] = v
    try:
        d, n, gamma = int(meta["d"]), int(meta["n"]), float(meta["gamma"])
    except (KeyError, ValueError) as exc:
        raise DomainError(f"bad roughpath header: {lines[0]!r}") from exc
    body = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    if len(body) != 2 * n - 1:
        raise DomainError(f"expected {2 * n - 1} data lines, found {len(body)}")
    nodes = np.array([[float(x) for x in ln.split()] for ln in body[:n]])
    if nodes.shape != (n, d + 1):
        raise DomainError("node lines must hold t and d coordinates")
    area = np.array([[float(x) for x in ln.split()] for ln in body[n:]]).reshape(n - 1, d, d) \
        if n > 1 else np.zeros((0, d, d))
    t = nodes[:, 0]
    grid = Grid(t[0], t[-1], n)
    if not np.allclose(t, grid.times, rtol=0, atol=1e-9 * max(1.0, abs(grid.length))):
        raise DomainError("node times are not uniformly spaced")
    return RoughPath(grid, nodes[:, 1:], area, gamma)
