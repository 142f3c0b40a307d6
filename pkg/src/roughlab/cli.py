"""Command-line entry point ``roughlab``.

Exit codes: 0 success, 2 configuration or domain error, 3 numerical
failure, 4 hypothesis violation (for example Hoermander's condition
failing).  ``--config FILE`` reads flat ``key = value`` lines whose keys
mirror the long flags; flags given on the command line take precedence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, HypothesisViolation, RoughlabError

STOCHASTIC = {"fbm", "tails", "experiment", "calibrate"}


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _out(text: str, dest):
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(dest, "w") as fh:
            fh.write(text)


def _json(obj, dest):
    from .lab import _jsonable
    _out(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", dest)


def _csv(header, rows, dest):
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _out(buf.getvalue(), dest)


# ---------------------------------------------------------------- subcommands

def cmd_fbm(a):
    from .fbm_noise import lift_fbm, sample_fbm
    from .rough_core import Grid, write_roughpath
    grid = Grid(0.0, a.T, a.n + 1)
    path = sample_fbm(a.hurst, grid, a.seed, a.dim, replicate=a.replicate)
    rp = lift_fbm(path, a.level, gamma=a.gamma)
    if a.out in (None, "-"):
        write_roughpath(rp, sys.stdout)
    else:
        write_roughpath(rp, a.out)
    return 0


def _system(a):
    from .rde_flow import load_system
    return load_system(a.system)


def _z0(a, vfs):
    z0 = _floats(a.z0)
    return np.zeros(vfs.dim_state) if z0 is None else np.array(z0)


def cmd_solve(a):
    from .rde_flow import solve_rde
    from .rough_core import read_roughpath
    vfs = _system(a)
    rp = read_roughpath(a.noise)
    sol = solve_rde(vfs, _z0(a, vfs), rp)
    t = rp.grid.times
    rows = [(t[i], *sol.z_values[i]) for i in range(t.size)]
    _csv(["t"] + [f"z{k}" for k in range(vfs.dim_state)], rows, a.out)
    return 0


def cmd_roughness(a):
    from .rough_core import read_roughpath
    from .roughness_norris import discrete_roughness
    rp = read_roughpath(a.input)
    rep = discrete_roughness(rp, a.theta, a.nmax, a.sphere_resolution)
    _json(rep.to_dict(), a.out)
    return 0


def cmd_norris(a):
    from .rough_core import ControlledPath, Path, read_roughpath
    from .roughness_norris import discrete_roughness, norris_bound
    rp = read_roughpath(a.input)
    n, d = rp.values.shape
    c0, c1 = (_floats(a.a_coef) + [0.0, 0.0])[:2]
    b0, b1 = (_floats(a.b_coef) + [0.0, 0.0])[:2]
    x = rp.values - rp.values[0]
    A = ControlledPath(rp, c0 + c1 * x, np.broadcast_to(c1 * np.eye(d), (n, d, d)))
    B = Path(rp.grid, (b0 + b1 * rp.grid.times)[:, None])
    rep = discrete_roughness(rp, a.theta, a.nmax)
    cert = norris_bound(A, B, rp, rep, r_mode=a.r_mode)
    _json({"certificate": cert.to_dict(), "roughness": rep.to_dict()}, a.out)
    return 0


def cmd_hormander(a):
    from .hypoellipticity import hormander_rank
    vfs = _system(a)
    rep = hormander_rank(vfs, _z0(a, vfs) if a.point is None else np.array(_floats(a.point)),
                         a.max_level, a.rank_tol)
    _json(rep.to_dict(), a.out)
    if not rep.satisfied:
        sys.stderr.write(f"roughlab: Hoermander condition fails: rank {rep.rank} < {rep.dim_state}\n")
        return HypothesisViolation.exit_code
    return 0


def cmd_malliavin(a):
    from .hypoellipticity import malliavin_report
    from .rde_flow import jacobian_flow
    from .rough_core import read_roughpath
    vfs = _system(a)
    rp = read_roughpath(a.noise)
    flow = jacobian_flow(vfs, _z0(a, vfs), rp)
    _json(malliavin_report(flow, vfs, a.hurst).to_dict(), a.out)
    return 0


def cmd_tails(a):
    eps = _floats(a.epsilons)
    if a.kind == "roughness":
        from .roughness_norris import roughness_tail_study
        res = roughness_tail_study(a.hurst, a.theta, a.n_samples, eps or list(np.linspace(0.2, 1.0, 9)),
                                   a.seed, a.n + 1, a.dim)
    else:
        from .hypoellipticity import eigen_tail_study
        res = eigen_tail_study(a.system or "levy", a.hurst, a.T, a.n_samples,
                               eps or list(np.geomspace(0.05, 1.0, 14)), a.seed, a.n, a.level)
    _csv(["epsilon", "prob_estimate", "stderr"], res["rows"], a.out)
    return 0


def cmd_experiment(a):
    from .lab import ExperimentConfig, run_experiment
    params = json.loads(a.params) if isinstance(a.params, str) else dict(a.params or {})
    cfg = ExperimentConfig(a.id, a.seed, a.hurst, a.T, a.n, a.n_samples, a.level, params, a.output_dir)
    rep = run_experiment(cfg)
    dest = a.out
    if dest is None and a.output_dir:
        import os
        os.makedirs(a.output_dir, exist_ok=True)
        dest = os.path.join(a.output_dir, f"{a.id}-{a.seed}.json")
    _json(rep, dest)
    return 0


def cmd_calibrate(a):
    from .lab import calibrate_constants
    _json(calibrate_constants(a.n_samples, a.seed), a.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roughlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"roughlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--config", help="key=value file mirroring the long flags")
        sp.add_argument("--out", help="output file (default stdout)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (required)")
        return sp

    s = common(sub.add_parser("fbm", help="sample an fBm path and write its lift"), seed=True)
    s.add_argument("--hurst", type=float, default=0.4)
    s.add_argument("--n", type=int, default=256, help="number of grid steps")
    s.add_argument("--T", "--t1", dest="T", type=float, default=1.0)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--level", type=int, default=2, help="dyadic refinements for the area")
    s.add_argument("--gamma", type=float)
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=cmd_fbm)

    s = common(sub.add_parser("solve", help="solve an RDE driven by a stored rough path"))
    s.add_argument("--system", default="levy", help="ou | levy | langevin | polynomial system file")
    s.add_argument("--noise", required=False, help="rough path file")
    s.add_argument("--z0")
    s.set_defaults(func=cmd_solve)

    s = common(sub.add_parser("roughness", help="discrete Hoelder roughness of a stored path"))
    s.add_argument("--in", dest="input")
    s.add_argument("--theta", type=float, default=0.45)
    s.add_argument("--nmax", type=int)
    s.add_argument("--sphere-resolution", type=int)
    s.set_defaults(func=cmd_roughness)

    s = common(sub.add_parser("norris", help="Norris certificate for A = c0 + c1 X, B = b0 + b1 t"))
    s.add_argument("--in", dest="input")
    s.add_argument("--theta", type=float, default=0.45)
    s.add_argument("--nmax", type=int)
    s.add_argument("--a-coef", default="1,0")
    s.add_argument("--b-coef", default="0,0")
    s.add_argument("--r-mode", choices=("sharp", "proof"), default="sharp")
    s.set_defaults(func=cmd_norris)

    s = common(sub.add_parser("hormander", help="bracket rank at a point"))
    s.add_argument("--system", default="levy")
    s.add_argument("--point")
    s.add_argument("--z0")
    s.add_argument("--max-level", type=int, default=3)
    s.add_argument("--rank-tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_hormander)

    s = common(sub.add_parser("malliavin", help="reduced and full Malliavin matrices"))
    s.add_argument("--system", default="levy")
    s.add_argument("--noise")
    s.add_argument("--hurst", type=float, default=0.4)
    s.add_argument("--z0")
    s.set_defaults(func=cmd_malliavin)

    s = common(sub.add_parser("tails", help="Monte-Carlo tail tables (CSV)"), seed=True)
    s.add_argument("kind", choices=("roughness", "eigen"))
    s.add_argument("--hurst", type=float, default=0.4)
    s.add_argument("--theta", type=float, default=0.45)
    s.add_argument("--n-samples", type=int, default=500)
    s.add_argument("--n", type=int, default=256, help="grid steps")
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--system")
    s.add_argument("--epsilons")
    s.set_defaults(func=cmd_tails)

    s = common(sub.add_parser("experiment", help="run a named experiment (JSON report)"), seed=True)
    s.add_argument("--id", choices=("ou", "levy", "langevin", "tails-roughness", "tails-eigen",
                                    "norris-suite"))
    s.add_argument("--hurst", type=float, default=0.4)
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--n", type=int, default=64, help="grid steps")
    s.add_argument("--n-samples", type=int, default=1000)
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--params", default="{}", help="JSON object of experiment parameters")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_experiment)

    s = common(sub.add_parser("calibrate", help="recompute the empirical constants file"), seed=True)
    s.add_argument("--n-samples", type=int, default=1000)
    s.set_defaults(func=cmd_calibrate)
    return p


def _apply_config(parser, args, argv):
    if not getattr(args, "config", None):
        return args
    from .lab import read_kv_config
    try:
        conf = read_kv_config(args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    given = {tok.split("=", 1)[0].lstrip("-").replace("-", "_")
             for tok in argv if tok.startswith("--")}
    for k, v in conf.items():
        key = "input" if k == "in" else k
        if key not in vars(args) or key in ("config", "func", "command"):
            raise ConfigError(f"unknown config key {k!r} for '{args.command}'")
        if key in given or (key == "input" and "in" in given):
            continue
        setattr(args, key, v)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and ConfigError.exit_code
    try:
        args = _apply_config(parser, args, argv)
        if args.command in STOCHASTIC and getattr(args, "seed", None) is None:
            raise ConfigError("--seed is required for stochastic subcommands")
        for need in ("input", "noise", "id"):
            if need in vars(args) and getattr(args, need) is None:
                raise ConfigError(f"--{'in' if need == 'input' else need} is required")
        return int(args.func(args))
    except RoughlabError as exc:
        sys.stderr.write(f"roughlab: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    except ValueError as exc:
        sys.stderr.write(f"roughlab: invalid input: {exc}\n")
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
