"""Batch front end: ``optinvest {solve,simulate,verify,sweep} --scenario FILE``.

Every output is a CSV whose leading ``#`` lines record the fully resolved
configuration, so a file can be replayed from its own header. Exit codes:
0 success, 1 check or validation failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .closed_form import (
    DegenerateBandError,
    IllPosedError,
    InfeasibleBequestError,
    InsolventError,
    PolicyFunctions,
    ProblemMismatchError,
    solve,
)
from .hjb_fd import Grid1D, UnstableSchemeError
from .model import (
    ProblemInstance,
    ScenarioError,
    dump_scenario,
    instance_hash,
    load_scenario,
    validate,
)
from .simulate import PathConfig, simulate_band, simulate_bequest, simulate_frictionless, write_trace_csv
from .verify import Faults, VerificationSuite, default_fd_grid, write_verdicts

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

RUN_DEFAULTS = {
    "seed": "20140801",
    "paths": "10000",
    "steps": "250",
    "scheme": "euler-maruyama",
    "grid": "200x2000",
    "grid_search_paths": "200000",
    "grid_search_steps": "500",
    "trace_paths": "0",
    "sample_times": "11",
    "sample_wealth": "17",
}


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_grid(text: str) -> tuple[int, int]:
    try:
        nx, nt = text.lower().split("x")
        return int(nx), int(nt)
    except ValueError:
        raise UsageError(f"--grid expects NXxNT, got {text!r}") from None


class Context:
    """Scenario, merged run settings and output directory for one command."""

    def __init__(self, args, command: str):
        self.command = command
        self.path = args.scenario
        self.instance, run = load_scenario(args.scenario)
        self.run = dict(RUN_DEFAULTS)
        self.run.update(run)
        if getattr(args, "seed", None) is not None:
            self.run["seed"] = str(args.seed)
        if getattr(args, "paths", None) is not None:
            self.run["paths"] = str(args.paths)
        if getattr(args, "grid", None) is not None:
            self.run["grid"] = args.grid
        self.out = Path(args.out or self.run.pop("out", "."))
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {self.out}: {exc.strerror}") from None

    def get(self, key: str, conv=str):
        try:
            return conv(self.run[key])
        except (KeyError, ValueError):
            raise UsageError(f"bad run setting {key}={self.run.get(key)!r}") from None

    @property
    def seed(self) -> int:
        seed = self.get("seed", int)
        if not 0 <= seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        return seed

    def path_config(self, paths_key: str = "paths", steps_key: str = "steps", scheme=None) -> PathConfig:
        try:
            return PathConfig(self.get(paths_key, int), self.get(steps_key, int), self.seed,
                              scheme or self.get("scheme"))
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def faults(self) -> Faults:
        return Faults(
            a_scale=float(self.run.get("fault_a_scale", 1.0)),
            fraction_scale=float(self.run.get("fault_fraction_scale", 1.0)),
            band_shift=float(self.run.get("fault_band_shift", 0.0)),
            bequest_sign=float(self.run.get("fault_bequest_sign", 1.0)),
        )

    def header(self, extra: dict | None = None) -> str:
        lines = [f"optinvest {__version__} {self.command}",
                 f"instance_hash = {instance_hash(self.instance)}"]
        for k, v in (extra or {}).items():
            lines.append(f"{k} = {_fmt(v)}")
        lines.append("")
        lines += dump_scenario(self.instance, self.run).rstrip("\n").splitlines()
        return "".join(f"# {line}".rstrip() + "\n" for line in lines)


def _write_rows(path: Path, header: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _check_valid(instance: ProblemInstance) -> None:
    report = validate(instance)
    for msg in report.messages():
        if msg.startswith("warning"):
            print(msg, file=sys.stderr)
    if not report.ok:
        raise ValueError("; ".join(f.message for f in report.errors))


def _state(instance: ProblemInstance):
    if instance.problem in ("terminal", "consumption"):
        return (instance.z_initial,)
    return (instance.z0_initial, instance.z1_initial)


def _initial_control(policy: PolicyFunctions, instance: ProblemInstance) -> float:
    if instance.problem in ("terminal", "consumption"):
        return float(policy.fraction_or_trade_at(0.0, instance.z_initial))
    return float(policy.trade_amount(0.0, instance.z0_initial, instance.z1_initial))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(ctx: Context) -> int:
    inst = ctx.instance
    _check_valid(inst)
    pol = solve(inst)
    p = inst.prefs
    n_t = ctx.get("sample_times", int)
    n_w = ctx.get("sample_wealth", int)
    times = np.linspace(0.0, p.T, n_t + 1)[:-1]
    rows = []
    if inst.problem in ("terminal", "consumption"):
        columns = ("t", "x", "value", "c", "u")
        xs = inst.z_initial * np.geomspace(0.25, 4.0, n_w)
        for t in times:
            w = np.asarray(pol.effective_wealth(t, xs, strict=False))
            ok = w > 0
            v = pol.value_at(t, xs[ok], strict=False)
            c = pol.consumption_at(t, xs[ok], strict=False)
            u = pol.fraction_or_trade_at(t, xs[ok], strict=False)
            rows += [(t, x, vv, cc, uu) for x, vv, cc, uu in zip(xs[ok], v, c, u)]
    else:
        columns = ("t", "z0", "z1", "value", "c", "trade", "target")
        scale = inst.z0_initial + inst.z1_initial
        grid = scale * np.linspace(0.0, 1.5, n_w)
        z0, z1 = (g.ravel() for g in np.meshgrid(grid, grid, indexing="ij"))
        for t in times:
            w = np.asarray(pol.effective_wealth(t, z0, z1, strict=False))
            ok = w > 0
            a, b = z0[ok], z1[ok]
            v = pol.value_at(t, a, b, strict=False)
            c = pol.consumption_at(t, a, b, strict=False)
            trade = pol.trade_amount(t, a, b)
            target = np.where(trade > 0, pol.band.L, np.where(trade < 0, pol.band.H, math.nan))
            rows += list(zip([t] * len(a), a, b, v, c, trade, target))
    n0 = pol.future_income(0.0) if inst.problem != "terminal" else 0.0
    summary = {"mu": pol.mu.mu, "a0": pol.a(0.0), "N0": n0, "merton_fraction": pol.pi_star}
    header = ctx.header(summary)
    _write_rows(ctx.out / "policy.csv", header, columns, rows)
    if pol.band is not None:
        b = pol.band
        _write_rows(ctx.out / "band.csv", header, ("L", "H", "pi_star", "chi", "chi0"),
                    [(b.L, b.H, b.pi_star, inst.costs.chi, inst.costs.chi0)])
    print(f"mu = {pol.mu.mu:.10g}")
    print(f"a(0) = {pol.a(0.0):.10g}")
    print(f"N(0) = {n0:.10g}")
    if pol.band is not None:
        print(f"band L = {pol.band.L:.10g}  H = {pol.band.H:.10g}")
    return EXIT_OK


def _simulate(inst: ProblemInstance, cfg: PathConfig, trace_paths: int = 0):
    pol = solve(inst)
    if inst.problem in ("terminal", "consumption"):
        return simulate_frictionless(inst, pol, cfg, trace_paths=trace_paths)
    if inst.problem == "bequest":
        return simulate_bequest(inst, cfg, policy=pol, trace_paths=trace_paths)
    return simulate_band(inst, pol.band, pol, cfg, trace_paths=trace_paths)


def cmd_simulate(ctx: Context, trace_paths: int | None = None) -> int:
    inst = ctx.instance
    _check_valid(inst)
    cfg = ctx.path_config()
    if trace_paths is not None:
        ctx.run["trace_paths"] = str(trace_paths)
    n_trace = ctx.get("trace_paths", int)
    res = _simulate(inst, cfg, n_trace)
    row = res.summary_row()
    row["mean_risky_share"] = float(np.mean(res.mean_risky_share))
    header = ctx.header()
    _write_rows(ctx.out / "sim_summary.csv", header, list(row), [list(row.values())])
    if n_trace:
        write_trace_csv(res, ctx.out / "paths.csv", header)
    print(f"j_mean = {res.j_mean:.10g} +/- {res.j_stderr:.3g}")
    if res.insolvent_paths:
        print(f"insolvent paths: {res.insolvent_paths}")
    return EXIT_OK


def cmd_verify(ctx: Context) -> int:
    inst = ctx.instance
    _check_valid(inst)
    solve(inst)
    nx, nt = parse_grid(ctx.get("grid"))
    base = default_fd_grid(inst, nx, nt)
    grid = Grid1D(float(ctx.run.get("fd_x_min", base.x_min)), float(ctx.run.get("fd_x_max", base.x_max)),
                  nx, nt, base.T)
    cfg = ctx.path_config()
    gs_cfg = ctx.path_config("grid_search_paths", "grid_search_steps", scheme="exact-lognormal")
    suite = VerificationSuite(inst, cfg, grid=grid, faults=ctx.faults(), grid_search_cfg=gs_cfg)
    suite.run()
    write_verdicts(suite, ctx.out / "verdict.csv", ctx.header())
    print(suite.summary())
    failed = suite.first_failure()
    if failed is not None:
        print(f"check failed: {failed.name}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


SWEEP_COLUMNS = ("merton_fraction", "mu", "a0", "N0", "c0", "control0", "L", "H", "band_width",
                 "value0", "trade_step_fraction", "shortfall_prob")


def _sweep_row(inst: ProblemInstance, cfg: PathConfig | None) -> list:
    pol = solve(inst)
    state = _state(inst)
    n0 = pol.future_income(0.0) if inst.problem != "terminal" else 0.0
    L = H = width = math.nan
    if pol.band is not None:
        L, H, width = pol.band.L, pol.band.H, pol.band.width
    freq = shortfall = math.nan
    if cfg is not None and inst.problem in ("transaction_costs", "bequest"):
        res = _simulate(inst, cfg)
        freq = res.trade_step_fraction
        shortfall = res.bequest_shortfall_prob
    return [pol.pi_star, pol.mu.mu, pol.a(0.0), n0, pol.consumption_at(0.0, *state),
            _initial_control(pol, inst), L, H, width, pol.value_at(0.0, *state), freq, shortfall]


def cmd_sweep(ctx: Context, param: str | None, values: str | None) -> int:
    param = param or ctx.run.get("sweep_param")
    values = values or ctx.run.get("sweep_values")
    if not param or not values:
        raise UsageError("sweep needs --param and --values (or sweep_param/sweep_values in [run])")
    try:
        vals = [float(v) for v in values.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be numbers: {values!r}") from None
    ctx.run["sweep_param"], ctx.run["sweep_values"] = param, ",".join(_fmt(v) for v in vals)
    simulate_too = ctx.run.get("sweep_simulate", "yes").lower() not in ("no", "false", "0")
    cfg = ctx.path_config() if simulate_too else None
    rows = []
    for v in vals:
        try:
            inst = ctx.instance.with_param(param, v)
        except (AttributeError, KeyError, TypeError) as exc:
            raise UsageError(f"unknown sweep parameter {param!r}") from exc
        _check_valid(inst)
        rows.append([v] + _sweep_row(inst, cfg))
    _write_rows(ctx.out / "sweep.csv", ctx.header(), (param,) + SWEEP_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {ctx.out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optinvest", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"optinvest {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, paths=True, grid=False):
        p.add_argument("--scenario", required=True, help="scenario INI file")
        p.add_argument("--out", help="output directory (default: [run] out or .)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        if paths:
            p.add_argument("--paths", type=int, help="Monte Carlo path count")
        if grid:
            p.add_argument("--grid", help="FD grid as NXxNT, e.g. 200x2000")
        return p

    common(sub.add_parser("solve", help="closed-form policy tables"), paths=False)
    sim = common(sub.add_parser("simulate", help="Monte Carlo summary"))
    sim.add_argument("--trace", type=int, metavar="N", help="write paths.csv for the first N paths")
    common(sub.add_parser("verify", help="closed form vs FD vs MC checks"), grid=True)
    sw = common(sub.add_parser("sweep", help="comparative statics over one parameter"))
    sw.add_argument("--param", help="dotted parameter name, e.g. costs.chi")
    sw.add_argument("--values", help="comma-separated values")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = Context(args, args.command)
        if args.command == "solve":
            return cmd_solve(ctx)
        if args.command == "simulate":
            return cmd_simulate(ctx, args.trace)
        if args.command == "verify":
            return cmd_verify(ctx)
        return cmd_sweep(ctx, args.param, args.values)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleBequestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (IllPosedError, InsolventError, DegenerateBandError, ProblemMismatchError,
            UnstableSchemeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"parameters: {dump_scenario(ctx.instance).strip()}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
