"""Command-line front end: ``gen-env``, ``compute`` and ``sweep``.

Exit codes: 0 success, 2 bad parameters or config, 3 solver failure,
4 sweep quality (too many failed samples).

Sweep configs are flat JSON objects with a ``version`` key; command-line
flags override values read from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .conductance import face_currents, mixed_operator, solve_mixed_potential
from .corrector import corrector_diagnostics, diffusion_matrix, solve_corrector
from .errors import ConvergenceError, DomainError, FormatError, ParameterError, UsageError
from .experiments import (
    QUANTITIES,
    SweepConfig,
    SweepError,
    applicable_bounds,
    run_sweep,
    tail_profile,
    write_outputs,
)
from .lattice import (
    CLOSED_BOX,
    TORUS,
    DistributionSpec,
    LatticeSpec,
    environment_from_weights,
    load_environment,
    sample_environment,
    save_environment,
)
from .potential_walk import green_function, sample_potential
from .spectral import dirichlet_spectral_statistic

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_SWEEP = 0, 2, 3, 4
CONFIG_VERSION = 1

log = logging.getLogger("rcmhomog")


@dataclass(frozen=True)
class CliConfig:
    """Flat sweep configuration as stored on disk."""

    quantity: str
    d: int
    N_list: tuple
    dist: str
    samples: int
    master_seed: int = 0
    tol: float = 1e-10
    entry: tuple = (0, 0)
    potential_dist: Optional[str] = None
    direction: Optional[tuple] = None
    threads: int = 1
    output: str = "sweep_out"
    plot: bool = False
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise FormatError(f"unsupported config version {self.version!r}")
        object.__setattr__(self, "N_list", tuple(int(n) for n in self.N_list))
        object.__setattr__(self, "entry", tuple(int(v) for v in self.entry))
        if self.direction is not None:
            object.__setattr__(self, "direction", tuple(int(v) for v in self.direction))
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise FormatError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        missing = [k for k in ("quantity", "d", "N_list", "dist", "samples") if k not in data]
        if missing:
            raise FormatError(f"missing config keys: {', '.join(missing)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(str(exc)) from exc

    def to_dict(self):
        out = asdict(self)
        for k in ("N_list", "entry", "direction"):
            if out[k] is not None:
                out[k] = list(out[k])
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc

    def to_sweep(self):
        return SweepConfig(
            quantity=self.quantity,
            d=self.d,
            N_list=self.N_list,
            dist=DistributionSpec.parse(self.dist),
            samples=self.samples,
            master_seed=self.master_seed,
            tol=self.tol,
            entry=self.entry,
            potential_dist=None if self.potential_dist is None else DistributionSpec.parse(self.potential_dist),
            direction=self.direction,
            output=self.output,
        )


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="rcmhomog", description="Random conductance model: homogenization statistics and sweeps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="sample an environment and save it as JSON")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dist", required=True, help="e.g. uniform-elliptic:2, two-point:0.5,0.5,2, power-low-tail:0.8,1")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--closure", choices=(TORUS, CLOSED_BOX), default=CLOSED_BOX)
    g.add_argument("-o", "--output", required=True)

    c = sub.add_parser("compute", help="one statistic on one environment, printed as JSON")
    c.add_argument("quantity", choices=("diffusion", "conductance", "spectral", "green"))
    c.add_argument("--env", help="environment file from gen-env")
    c.add_argument("--d", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--dist", default="constant:1")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--weights", type=_float_list, help="explicit canonical edge weights")
    c.add_argument("--tol", type=float, default=None)
    c.add_argument("--potential", default="two-point:0.5,0,1.718281828459045", help="potential law (green)")
    c.add_argument("--x", type=_int_list, help="start site (green), default origin")
    c.add_argument("--y", type=_int_list, help="target site (green), default N e_1")
    c.add_argument("--conductance", type=float, default=1.0, help="constant conductance (green)")
    c.add_argument("-o", "--output", help="also write the JSON here")

    s = sub.add_parser("sweep", help="Monte Carlo sweep; writes CSV and summary JSON")
    s.add_argument("--config", help="flat JSON config; flags below override it")
    s.add_argument("--quantity", choices=QUANTITIES)
    s.add_argument("--d", type=int)
    s.add_argument("--N-list", dest="N_list", type=_int_list)
    s.add_argument("--dist")
    s.add_argument("--potential-dist", dest="potential_dist")
    s.add_argument("--samples", type=int)
    s.add_argument("--master-seed", dest="master_seed", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--entry", type=_int_list)
    s.add_argument("--direction", type=_int_list)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", dest="output")
    s.add_argument("--plot", action="store_true", default=None, help="write SVG figures next to the CSV")
    s.add_argument("--write-config", help="save the merged config here and continue")
    return p


# --- gen-env ------------------------------------------------------------


def cmd_gen_env(args):
    lattice = LatticeSpec(args.d, args.n, args.closure)
    env = sample_environment(lattice, DistributionSpec.parse(args.dist), args.seed)
    path = save_environment(env, args.output)
    w = env.weights
    print(f"{path}  edges={w.size} min={w.min():.6g} max={w.max():.6g} mean={w.mean():.6g}")
    return EXIT_OK


# --- compute ------------------------------------------------------------


def _environment(args, closure):
    if args.env:
        env = load_environment(args.env)
        if env.lattice.closure != closure:
            raise DomainError(f"{args.quantity} needs a {closure} environment, file has {env.lattice.closure}")
        return env
    if args.d is None or args.n is None:
        raise UsageError("give --env or both --d and --n")
    lattice = LatticeSpec(args.d, args.n, closure)
    if args.weights is not None:
        return environment_from_weights(lattice, args.weights, args.seed)
    return sample_environment(lattice, DistributionSpec.parse(args.dist), args.seed)


def _compute_diffusion(args):
    env = _environment(args, TORUS)
    corr = solve_corrector(env, args.tol or 1e-10)
    D = diffusion_matrix(env, corr)
    diag = corrector_diagnostics(env, corr)
    value = float(D[0, 0]) if env.d == 1 else D.tolist()
    return {"quantity": "diffusion", "value": value, "matrix": D.tolist(), "residual": corr.residual,
            "iterations": list(corr.iterations), "diagnostics": diag}


def _compute_conductance(args):
    env = _environment(args, CLOSED_BOX)
    sol = solve_mixed_potential(env, args.tol or 1e-10)
    op = mixed_operator(env)
    v_in = sol.v[op.interior]
    return {"quantity": "conductance", "value": sol.f, "residual": sol.residual, "iterations": sol.iterations,
            "diagnostics": {"flux": sol.flux, "flux_far": sol.flux_far, "energy": sol.energy,
                            "edge_energy": sol.edge_energy, "v_min": float(v_in.min()), "v_max": float(v_in.max()),
                            "currents": list(face_currents(op, sol.v))}}


def _compute_spectral(args):
    env = _environment(args, CLOSED_BOX)
    sol = dirichlet_spectral_statistic(env, args.tol or 1e-12)
    return {"quantity": "spectral", "value": sol.lam, "lambda": sol.lam, "f": sol.f, "residual": sol.residual,
            "iterations": sol.iterations, "diagnostics": {"energy": sol.energy}}


def _compute_green(args):
    d = args.d
    if d is None or args.n is None:
        raise UsageError("green needs --d and --n")
    pot_dist = DistributionSpec.parse(args.potential)
    x = np.array(args.x if args.x is not None else (0,) * d, dtype=np.int64)
    y = np.array(args.y if args.y is not None else (args.n,) + (0,) * (d - 1), dtype=np.int64)
    if x.shape != (d,) or y.shape != (d,):
        raise ParameterError("--x and --y need d coordinates")
    pot = sample_potential(pot_dist, args.seed, (0,) * d, 1)
    sol = green_function(args.conductance, pot, x, y, tol=args.tol or 1e-10)
    dist = max(int(np.abs(y - x).max()), 1)
    return {"quantity": "green", "value": sol.value, "log_value": sol.log_value, "f": -sol.log_value / dist,
            "residual": sol.truncation_gap, "iterations": len(sol.boxes),
            "diagnostics": {"box_side": sol.box_side, "converged": sol.converged,
                            "boxes": [list(b) for b in sol.boxes]}}


_COMPUTE = {"diffusion": _compute_diffusion, "conductance": _compute_conductance,
            "spectral": _compute_spectral, "green": _compute_green}


def cmd_compute(args):
    out = _COMPUTE[args.quantity](args)
    text = json.dumps(_jsonable(out), indent=2, sort_keys=True)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --- sweep --------------------------------------------------------------


_SWEEP_KEYS = ("quantity", "d", "N_list", "dist", "potential_dist", "samples", "master_seed", "tol", "entry",
               "direction", "threads", "output", "plot")


def merged_config(args):
    """Config file values with non-None flag values layered on top."""
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise FormatError("config must be a JSON object")
    for key in _SWEEP_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            data[key] = list(val) if isinstance(val, tuple) else val
    data.setdefault("version", CONFIG_VERSION)
    return CliConfig.from_dict(data)


def cmd_sweep(args):
    cfg = merged_config(args)
    if args.write_config:
        Path(args.write_config).write_text(cfg.dumps())
    sweep = cfg.to_sweep()
    result = run_sweep(sweep, threads=cfg.threads)
    csv_path, json_path = write_outputs(result, cfg.output)
    print(csv_path)
    print(json_path)
    if cfg.plot:
        for path in write_plots(result, cfg.output):
            print(path)
    return EXIT_OK


def write_plots(result, outdir):
    """SVG figures: log variance against log N, and tail exceedance at the largest N.

    Output is deterministic: fixed hash salt and no date metadata.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = result.config
    outdir = Path(outdir)
    stem = cfg.run_id
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "rcmhomog", "svg.fonttype": "path"}):
        Ns = np.array(cfg.N_list, dtype=float)
        var = np.array([result.stats[N].variance for N in cfg.N_list])
        fig, ax = plt.subplots(figsize=(5, 4))
        keep = var > 0
        ax.loglog(Ns[keep], var[keep], "o-", label="empirical Var")
        for b in applicable_bounds(cfg):
            if b.constant is not None:
                ax.loglog(Ns, [b.value(N) for N in cfg.N_list], "--", label=f"bound {b.name}")
        ax.set_xlabel("N")
        ax.set_ylabel("variance")
        ax.set_title(cfg.quantity)
        ax.legend()
        p = outdir / f"{stem}.variance.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)

        N = cfg.N_list[-1]
        vals = result.values[N]
        if len(vals):
            tails = [b for b in applicable_bounds(cfg) if b.tail is not None]
            bound = tails[0] if tails else None
            rho = bound.rho if bound else (cfg.d - 2) / 2
            table = tail_profile(vals, N, rho, bound=bound.tail if bound else None)
            fig, ax = plt.subplots(figsize=(5, 4))
            ts = [r["t"] for r in table]
            ax.plot(ts, [r["freq"] for r in table], "o-", label="empirical exceedance")
            if bound:
                ax.plot(ts, [r["bound"] for r in table], "--", label=f"bound {bound.name}")
            ax.set_xlabel("t")
            ax.set_ylabel("P(|f - mean| >= t N^-rho)")
            ax.set_title(f"tail profile, N={N}")
            ax.legend()
            p = outdir / f"{stem}.tail.svg"
            fig.savefig(p, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(p)
    return paths


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        handler = {"gen-env": cmd_gen_env, "compute": cmd_compute, "sweep": cmd_sweep}[args.command]
        return handler(args)
    except (ParameterError, FormatError, UsageError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SweepError as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_SWEEP


if __name__ == "__main__":
    sys.exit(main())
