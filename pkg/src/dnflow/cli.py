"""Command line runner: ``dnflow {run,verify,excess-scan,fractal,rescale}``.

Exit codes: 0 success, 1 a verify check failed, 2 configuration error,
3 solver failure (partial trajectory kept), 4 diagnostic cylinder outside
the space-time domain.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import matplotlib
import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import diagnostics as dg
from . import excess as ex
from . import fractal as fr
from .checkpoint import load_trajectory, save_trajectory
from .config import ConfigError, ExperimentConfig, load_config
from .plotting import plot_energies, plot_loglog
from .potentials import ConvexityError, check_convexity
from .scheme import SchemeError, Trajectory, build_interpolants, discrete_energies, run_scheme

log = logging.getLogger("dnflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER, EXIT_DOMAIN = 0, 1, 2, 3, 4


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, command: str):
        self.cfg = cfg
        self.out = out
        self.command = command
        self.artifacts: List[str] = []
        self.grid = cfg.build_grid()
        self.potential = cfg.build_potential()
        self.integrand = cfg.build_integrand()

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest(self, status: str, **extra) -> None:
        files = {}
        for name in sorted(set(self.artifacts)):
            p = self.out / name
            if p.is_file():
                files[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {
            "command": self.command,
            "status": status,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": {
                "dnflow": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "matplotlib": matplotlib.__version__,
            },
            "cover_note": fr.COVER_NOTE,
            "artifacts": files,
            **extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _f(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# pipeline pieces


def solve(ctx: Context, checkpoint: Optional[str] = None) -> Trajectory:
    if checkpoint:
        tr = load_trajectory(checkpoint, ctx.potential, ctx.integrand)
        if tr.grid != ctx.grid:
            raise ConfigError("checkpoint grid does not match the configuration")
        return tr
    g = ctx.cfg.build_initial(ctx.grid)
    tr = run_scheme(g, ctx.cfg.scheme_config(), ctx.potential, ctx.integrand)
    save_trajectory(ctx.out / "trajectory", tr)
    ctx.artifacts.append("trajectory/trajectory.json")
    return tr


def cutoff(ctx: Context, tr: Trajectory) -> dg.Cutoff:
    d = ctx.cfg.diagnostics
    if d.cutoff == "flat":
        return dg.Cutoff.flat()
    return dg.Cutoff.centered(tr.grid, tr.t0, tr.T_end, d.cutoff, d.plateau, d.collar)


def write_energies(ctx: Context, tr: Trajectory) -> Path:
    e = discrete_energies(tr)
    res = np.concatenate([[0.0], tr.residuals]) if tr.stats else np.zeros(tr.N + 1)
    its = np.concatenate([[0], tr.iterations]) if tr.stats else np.zeros(tr.N + 1, int)
    path = ctx.path("energies.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = ["l2", "grad_l2", "psi_star", "F", "dissipation"]
        w.writerow(["k", "t"] + keys + ["residual", "iterations"])
        for k, t in enumerate(tr.times):
            w.writerow([k, _f(t)] + [_f(e[key][k]) for key in keys] + [_f(res[k]), int(its[k])])
    return path


def write_identities(ctx: Context, tr: Trajectory, eta: dg.Cutoff) -> None:
    flat = dg.Cutoff.flat()
    series = [dg.check_identity_1(tr, flat), dg.check_identity_2(tr, flat),
              dg.check_identity_1(tr, eta), dg.check_identity_2(tr, eta)]
    with open(ctx.path("identities.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "identity_1_flat", "identity_2_flat",
                    "identity_1_cutoff", "identity_2_cutoff"])
        for k in range(tr.N):
            w.writerow([k + 1, _f(tr.times[k + 1])] + [_f(s.series[k]) for s in series])
        w.writerow(["l1", ""] + [_f(s.l1) for s in series])


def energy_reports(ctx: Context, tr: Trajectory, eta: dg.Cutoff) -> List[dg.EnergyReport]:
    reps = [dg.check_energy_bound_1(tr, eta), dg.check_energy_bound_2(tr, eta),
            dg.check_global_bound_1(tr), dg.check_global_bound_2(tr)]
    for row in ctx.cfg.diagnostics.cylinders:
        Q = _cylinder(row)
        if Q.scaled(2.0).inside(tr):
            rep = dg.check_caccioppoli(tr, Q)
            rep.name = f"caccioppoli@{';'.join(map(repr, Q.center))};{Q.t!r};{Q.r!r}"
            reps.append(rep)
    dg.write_energy_reports(ctx.path("energy_reports.csv"), reps)
    return reps


def _cylinder(row) -> ex.ParabolicCylinder:
    return ex.ParabolicCylinder(tuple(row[:-2]), float(row[-2]), float(row[-1]))


def excess_scan(ctx: Context, tr: Trajectory) -> None:
    d = ctx.cfg.diagnostics
    reports, decay_rows = [], []
    for row in d.cylinders:
        Q = _cylinder(row)
        rep = ex.compute_excess(tr, Q)
        small = ex.compute_excess(tr, Q.scaled(d.decay_theta))
        reports += [rep, small]
        probe = ex.decay_probe(tr, Q.center, Q.t, Q.r, d.decay_theta)
        try:
            pr = ex.check_poincare_excess(tr, Q)
            pratio = pr.ratio
        except ex.EmptyCylinder:
            pratio = math.nan
        shift = ex.average_shift_bounds(tr, Q, d.decay_theta)
        decay_rows.append([";".join(map(_f, Q.center)), _f(Q.t), _f(Q.r), _f(d.decay_theta),
                           _f(probe.E_r), _f(probe.E_theta_r), _f(probe.ratio),
                           str(probe.degenerate).lower(), _f(pratio), _f(shift.slack)])
    ex.write_excess_scan(ctx.path("excess.csv"), reports)
    with open(ctx.path("decay.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "t", "r", "theta", "E_r", "E_theta_r", "ratio", "degenerate",
                    "poincare_ratio", "shift_slack"])
        w.writerows(decay_rows)
    if d.radii and d.fit_center:
        x, t = tuple(d.fit_center[:-1]), d.fit_center[-1]
        E = [ex.compute_excess(tr, ex.ParabolicCylinder(x, t, r)).E for r in d.radii]
        path = ctx.path("campanato.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "E"])
            w.writerows([[_f(r), _f(e)] for r, e in zip(d.radii, E)])
            try:
                fit = ex.fit_power_law(d.radii, E)
                w.writerow(["alpha", _f(fit.alpha)])
                w.writerow(["C", _f(fit.C)])
                w.writerow(["residual", _f(fit.residual)])
                slope = fit.alpha
            except ex.DegenerateFit:
                w.writerow(["alpha", "degenerate"])
                slope = None
        if d.plots:
            plot_loglog(path, ctx.path("plots/campanato.svg"), "r", "E", "excess decay", slope)


def fractional(ctx: Context, tr: Trajectory) -> Optional[ex.FractionalFit]:
    d = ctx.cfg.diagnostics
    if not d.frac_window or not d.frac_times:
        return None
    offsets = [j * tr.tau for j in d.offsets]
    fit = ex.fractional_fit(tr, (d.frac_window[0], d.frac_window[1]), d.frac_times[0],
                            d.frac_times[1], offsets, d.p, d.fit_margin)
    path = ctx.path("fractional.csv")
    ex.write_fractional_fit(path, fit)
    if d.plots and np.all(fit.integrals > 0):
        plot_loglog(path, ctx.path("plots/fractional.svg"), "h", "I", "time differences", fit.slope)
    return fit


def fractal(ctx: Context, tr: Trajectory) -> Optional[fr.FractalEstimate]:
    d = ctx.cfg.diagnostics
    S = fr.mark_bad_set(tr, d.bad_radius, d.bad_threshold, stride=d.bad_stride)
    path = ctx.path("fractal.csv")
    scales = fr.dyadic_scales(S)
    if len(scales) < 3:
        path.write_text("delta,N\nstatus,insufficient scales above the grid resolution\n")
        return None
    est = fr.estimate_dimension(S, scales, s_values=d.s_values, beta=d.beta, p=d.p)
    fr.write_fractal(path, est)
    if d.plots and not est.empty:
        plot_loglog(path, ctx.path("plots/fractal.svg"), "delta", "N", "parabolic box count",
                    -est.dim_hat)
    return est


def rescale(ctx: Context, tr: Trajectory) -> Optional[ex.RescaleResult]:
    d = ctx.cfg.diagnostics
    if not d.rescale:
        return None
    Q = _cylinder(d.rescale)
    E = ex.compute_excess(tr, Q).E
    path = ctx.path("rescale.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["E", _f(E)])
        if E <= 0:
            w.writerow(["status", "degenerate"])
            return None
        res = ex.rescale_blowup(tr, Q.center, Q.t, Q.r, math.sqrt(E))
        w.writerow(["eps", _f(res.eps)])
        w.writerow(["normalization", _f(res.normalization())])
        for i, a in enumerate(res.shift):
            w.writerow([f"shift_{i}", _f(a)])
        for (i, j), M in np.ndenumerate(res.tilt):
            w.writerow([f"tilt_{i}_{j}", _f(M)])
    save_trajectory(ctx.out / "rescaled", res.field)
    return res


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(ctx: Context, args) -> int:
    tr = solve(ctx, args.checkpoint)
    eta = cutoff(ctx, tr)
    energies = write_energies(ctx, tr)
    if ctx.cfg.diagnostics.plots:
        plot_energies(energies, ctx.path("plots/energies.svg"))
    write_identities(ctx, tr, eta)
    energy_reports(ctx, tr, eta)
    excess_scan(ctx, tr)
    fractional(ctx, tr)
    fractal(ctx, tr)
    rescale(ctx, tr)
    ctx.manifest("ok")
    return EXIT_OK


def verify_checks(ctx: Context, tr: Trajectory) -> List[tuple]:
    """(name, value, passed) for every assertion-bearing diagnostic."""
    out = []
    for p in (ctx.potential, ctx.integrand):
        rep = check_convexity(p, 256, 20240229)
        out.append((f"convexity_{p.key}", rep.min_quotient, rep.passed))
    sbp = dg.check_sbp(tr.grid, tr.m, pairs=20, seed=ctx.cfg.seed)
    out.append(("summation_by_parts", sbp, sbp <= 1e-12))
    I = build_interpolants(tr)
    lhs, rhs = I.gap_l2_squared(), I.tau_third_sum()
    rel = abs(lhs - rhs) / rhs if rhs > 0 else abs(lhs)
    out.append(("tau_third_identity", rel, rel <= 1e-12))
    e = discrete_energies(tr)
    for key in ("psi_star", "F"):
        inc = float(np.max(np.diff(e[key]), initial=0.0))
        tol = 1e-13 * max(float(np.max(np.abs(e[key]), initial=0.0)), 1e-300)
        out.append((f"monotone_{key}", inc, inc <= tol))
    eta = cutoff(ctx, tr)
    for rep in (dg.check_energy_bound_1(tr, eta), dg.check_energy_bound_2(tr, eta),
                dg.check_global_bound_1(tr), dg.check_global_bound_2(tr)):
        out.append((rep.name, rep.ratio, rep.passed))
    return out


def cmd_verify(ctx: Context, args) -> int:
    tr = solve(ctx, args.checkpoint)
    checks = verify_checks(ctx, tr)
    with open(ctx.path("verify.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "value", "pass"])
        for name, value, ok in checks:
            w.writerow([name, _f(value), str(bool(ok)).lower()])
    for name, value, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} {value:.3e}")
    failed = [c for c in checks if not c[2]]
    ctx.manifest("ok" if not failed else "failed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_excess(ctx: Context, args) -> int:
    tr = solve(ctx, args.checkpoint)
    excess_scan(ctx, tr)
    fractional(ctx, tr)
    ctx.manifest("ok")
    return EXIT_OK


def cmd_fractal(ctx: Context, args) -> int:
    tr = solve(ctx, args.checkpoint)
    est = fractal(ctx, tr)
    if est is None:
        print("dim_hat unavailable: fewer than three admissible scales")
        ctx.manifest("insufficient_scales")
        return EXIT_OK
    print("dim_hat", "empty" if est.empty else f"{est.dim_hat:.4f}", "target", f"{est.target:.4f}")
    ctx.manifest("ok")
    return EXIT_OK


def cmd_rescale(ctx: Context, args) -> int:
    tr = solve(ctx, args.checkpoint)
    res = rescale(ctx, tr)
    if res is not None:
        print("normalization", f"{res.normalization():.6f}")
    ctx.manifest("ok")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "verify": cmd_verify,
    "excess-scan": cmd_excess,
    "fractal": cmd_fractal,
    "rescale": cmd_rescale,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dnflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML file or preset name")
        sp.add_argument("--out", help="artifact directory (default out/<name>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="BLAS thread limit")
        sp.add_argument("--checkpoint", help="reuse a saved trajectory instead of solving")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed}, cfg.base_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out or Path("out") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ctx = Context(cfg, out, args.command)
    except ConvexityError as exc:
        print(f"FAIL convexity: {exc}", file=sys.stderr)
        return EXIT_FAIL if args.command == "verify" else EXIT_CONFIG
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else cfg.threads
    limit = threadpool_limits(limits=threads) if threads else nullcontext()
    with limit:
        try:
            return COMMANDS[args.command](ctx, args)
        except SchemeError as exc:
            if exc.partial is not None:
                save_trajectory(ctx.out / "trajectory.partial", exc.partial)
            ctx.manifest("solver_failure", error=str(exc), failed_step=exc.step)
            print(f"solver failure at step {exc.step}: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        except ex.CylinderOutOfDomain as exc:
            ctx.manifest("out_of_domain", error=str(exc))
            print(f"out of domain: {exc}", file=sys.stderr)
            return EXIT_DOMAIN
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
