"""Cross-checks between the closed forms, the finite-difference oracle and Monte Carlo.

Each check returns :class:`CheckResult` records carrying the measured
quantity, its tolerance and the seed used, so a verdict can be replayed.
Every check also accepts a deliberately corrupted input (see the
``fault_*`` run settings) and must fail on it.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .closed_form import (
    PolicyFunctions,
    merton_fraction,
    no_trade_band,
    solve,
)
from .hjb_fd import ControlGrid, Grid1D, fd_instance, residual_scan, solve_backward
from .model import ProblemInstance, TransactionCosts, instance_hash
from .simulate import PathConfig, constant_fraction_utilities, simulate_band, simulate_frictionless


@dataclass(frozen=True)
class Tolerances:
    fd_rel: float = 0.01
    mc_sigmas: float = 3.0
    residual: float = 1e-6
    control_steps: float = 1.0
    band_slack: float = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seed: int | None = None
    message: str = ""
    runtime: float = 0.0
    details: dict = field(default_factory=dict)
    skipped: bool = False

    @property
    def status(self) -> str:
        if self.skipped:
            return "skip"
        return "pass" if self.passed else "fail"


@dataclass(frozen=True)
class Faults:
    """Corruptions injected into the checked solution (all identity by default)."""

    a_scale: float = 1.0
    fraction_scale: float = 1.0
    band_shift: float = 0.0
    bequest_sign: float = 1.0

    @property
    def any(self) -> bool:
        return self != Faults()


def _policy(instance: ProblemInstance, faults: Faults) -> PolicyFunctions:
    pol = solve(instance)
    if faults.a_scale != 1.0 or faults.fraction_scale != 1.0:
        pol = pol.with_faults(a_scale=faults.a_scale, fraction_scale=faults.fraction_scale)
    return pol


def default_fd_grid(instance: ProblemInstance, n_x: int = 200, n_t: int = 2000) -> Grid1D:
    """Log-uniform grid around the initial (effective) wealth."""
    inst = fd_instance(instance)
    z = inst.z_initial
    lo = 0.1 if inst.income.kind == "zero" or inst.problem == "terminal" else 1e-3
    return Grid1D(lo * z, 10.0 * z, n_x, n_t, inst.prefs.T)


def default_controls(instance: ProblemInstance) -> ControlGrid:
    inst = fd_instance(instance)
    pi = merton_fraction(inst.market, inst.prefs.gamma)
    u_max = max(2.0, math.ceil(2.0 * abs(pi) * 10.0) / 10.0)
    if inst.problem == "consumption" and inst.income.kind != "zero":
        u_max = max(u_max, 3.0)
    return ControlGrid(u_min=min(0.0, 2.0 * pi), u_max=u_max)


# ---------------------------------------------------------------------------
# value agreement
# ---------------------------------------------------------------------------

def check_value_agreement(instance: ProblemInstance, grid: Grid1D | None = None,
                          cfg: PathConfig | None = None, *, controls: ControlGrid | None = None,
                          faults: Faults = Faults(), tol: Tolerances = Tolerances()) -> list[CheckResult]:
    """Closed form against the FD oracle on interior nodes and against MC at ``t = 0``.

    Transaction-cost and bequest problems are compared in their reduced
    effective-wealth form; their Monte Carlo leg runs the band simulation
    and is only meaningful when costs vanish, so it is skipped otherwise.
    """
    cfg = cfg or PathConfig()
    out = []
    started = time.perf_counter()
    policy = _policy(instance, faults)
    fd_inst = fd_instance(instance)
    ref = policy.transformed() if fd_inst is not instance else policy
    grid = grid or default_fd_grid(instance)
    surface = solve_backward(instance, grid, controls or default_controls(instance))
    sl = grid.interior(0.8)
    x = grid.x[sl]
    exact = np.asarray(ref.value_at(0.0, x, strict=False))
    fd = surface.values[0][sl]
    rel = np.abs(fd - exact) / np.abs(exact)
    worst = int(np.nanargmax(rel))
    err = float(rel[worst])
    ok = bool(np.isfinite(err) and err <= tol.fd_rel)
    msg = "" if ok else (f"disagreement: x={x[worst]:.6g} closed form={exact[worst]:.8g} "
                         f"FD={fd[worst]:.8g}")
    out.append(CheckResult("value_agreement.fd", ok, err, tol.fd_rel, None, msg,
                           time.perf_counter() - started,
                           {"nodes": int(len(x)), "substeps": surface.substeps}))

    started = time.perf_counter()
    if instance.problem in ("terminal", "consumption"):
        phi0 = float(policy.value_at(0.0, instance.z_initial))
        sim = simulate_frictionless(instance, policy, cfg)
    elif instance.costs.is_zero:
        phi0 = float(policy.value_at(0.0, instance.z0_initial, instance.z1_initial))
        sim = simulate_band(instance, policy.band, policy, cfg)
    else:
        out.append(CheckResult("value_agreement.mc", True, math.nan, tol.mc_sigmas, cfg.seed,
                               "transaction costs: the band value is not attained from an off-band start",
                               skipped=True))
        return out
    z = abs(sim.j_mean - phi0) / sim.j_stderr
    ok = bool(z <= tol.mc_sigmas)
    msg = "" if ok else (f"disagreement: closed form={phi0:.8g} MC={sim.j_mean:.8g} "
                         f"stderr={sim.j_stderr:.3g}")
    out.append(CheckResult("value_agreement.mc", ok, float(z), tol.mc_sigmas, cfg.seed, msg,
                           time.perf_counter() - started,
                           {"phi0": phi0, "j_mean": sim.j_mean, "j_stderr": sim.j_stderr,
                            "insolvent": sim.insolvent_paths}))
    return out


# ---------------------------------------------------------------------------
# constant-fraction grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSearchResult:
    fractions: np.ndarray
    j_means: np.ndarray
    diff_stderr: np.ndarray
    best: float
    noise_band: float
    flat: bool


def grid_search_constant_fraction(instance: ProblemInstance, u_grid, cfg: PathConfig,
                                  sigmas: float = 3.0) -> GridSearchResult:
    """Argmax of MC expected terminal utility over constant fractions.

    All candidates share the same Brownian paths, so differences between
    candidates are estimated with the paired standard error. The noise band
    is the largest distance from the argmax to a candidate within
    ``sigmas`` paired standard errors of the best.
    """
    u = np.asarray(u_grid, dtype=float)
    util = constant_fraction_utilities(instance, u, cfg)
    j = util.mean(axis=1)
    i = int(np.argmax(j))
    diff = util[i][None, :] - util
    se = diff.std(axis=1, ddof=1) / math.sqrt(util.shape[1])
    gap = j[i] - j
    close = gap <= sigmas * se
    noise = float(np.max(np.abs(u[close] - u[i])))
    order = np.argsort(j)[::-1]
    flat = bool(len(u) > 1 and gap[order[1]] <= se[order[1]])
    return GridSearchResult(u, j, se, float(u[i]), noise, flat)


def check_grid_search(instance: ProblemInstance, cfg: PathConfig, *, u_step: float = 0.05,
                      u_max: float | None = None, faults: Faults = Faults(),
                      tol: Tolerances = Tolerances()) -> CheckResult:
    started = time.perf_counter()
    pi = merton_fraction(instance.market, instance.prefs.gamma)
    expected = float(_policy(instance, faults).fraction_or_trade_at(0.0, instance.z_initial))
    hi = u_max if u_max is not None else max(2.0, 1.5 * abs(pi))
    lo = min(0.0, 1.5 * pi)
    n = int(round((hi - lo) / u_step))
    u_grid = np.round(lo + u_step * np.arange(n + 1), 12)
    res = grid_search_constant_fraction(instance, u_grid, cfg, tol.mc_sigmas)
    allowed = u_step + res.noise_band
    dev = abs(res.best - expected)
    ok = dev <= allowed + 1e-12
    msg = f"argmax={res.best:g} policy fraction={expected:.6g}"
    if res.flat:
        msg += "; flat objective: top two candidates within one paired stderr"
    return CheckResult("grid_search", ok, dev, allowed, cfg.seed, msg, time.perf_counter() - started,
                       {"argmax": res.best, "noise_band": res.noise_band, "flat": res.flat})


# ---------------------------------------------------------------------------
# HJB residual
# ---------------------------------------------------------------------------

def check_hjb_residual(instance: ProblemInstance, *, faults: Faults = Faults(),
                       tol: Tolerances = Tolerances(), controls: ControlGrid | None = None) -> CheckResult:
    started = time.perf_counter()
    policy = _policy(instance, faults)
    controls = controls or default_controls(instance)
    rep = residual_scan(policy, controls=controls)
    gap = rep.control_gap_steps()
    ok = rep.passed(tol.residual) and gap <= tol.control_steps + 1e-9
    msg = f"control gap {gap:.3g} grid steps"
    if rep.failed.any():
        msg += f"; {int(rep.failed.sum())} sample states could not be evaluated"
    return CheckResult("hjb_residual", bool(ok), rep.max_residual, tol.residual, None, msg,
                       time.perf_counter() - started, {"control_gap_steps": gap})


# ---------------------------------------------------------------------------
# band behaviour
# ---------------------------------------------------------------------------

def _with_costs(instance: ProblemInstance, chi: float, chi0: float) -> ProblemInstance:
    return replace(instance, costs=TransactionCosts(chi, chi0))


def check_band_behavior(instance: ProblemInstance, cfg: PathConfig, *, faults: Faults = Faults(),
                        tol: Tolerances = Tolerances()) -> CheckResult:
    """Projection lands inside the band, trading thins out with chi, chi0 shifts the band down.

    ``faults.band_shift`` moves the band the simulation trades to, which
    the bracket test against the analytic band must catch.
    """
    started = time.perf_counter()
    policy = solve(instance)
    band = policy.band
    sim_band = replace(band, L=band.L + faults.band_shift, H=band.H + faults.band_shift)
    sim = simulate_band(instance, sim_band, policy, cfg)
    lo, hi = sim.post_trade_range
    excess = 0.0
    if np.isfinite(lo):
        excess = max(band.L - lo, hi - band.H, 0.0)
    problems = []
    if excess > tol.band_slack:
        problems.append(f"band violation: post-trade proportions [{lo:.12g}, {hi:.12g}] "
                        f"outside [{band.L:.12g}, {band.H:.12g}]")

    chi, chi0 = instance.costs.chi, instance.costs.chi0
    small = min(max(chi, 0.01), 0.5)
    big = small + 0.03
    freq = []
    for c in (small, big):
        inst_c = _with_costs(instance, c, chi0)
        pol_c = solve(inst_c)
        freq.append(simulate_band(inst_c, pol_c.band, pol_c, cfg).trade_step_fraction)
    if not freq[1] < freq[0]:
        problems.append(f"trade frequency did not fall: chi={small:g} -> {freq[0]:.4g}, "
                        f"chi={big:g} -> {freq[1]:.4g}")

    pi = policy.pi_star
    chi_s = max(chi, abs(chi0) + 0.01, 0.02)
    b0 = no_trade_band(pi, TransactionCosts(chi_s, chi0))
    b1 = no_trade_band(pi, TransactionCosts(chi_s, chi0 + 0.01))
    if not (b1.L < b0.L and b1.H < b0.H):
        problems.append("raising chi0 did not lower both band edges")
    return CheckResult("band_behavior", not problems, excess, tol.band_slack, cfg.seed,
                       "; ".join(problems), time.perf_counter() - started,
                       {"trade_step_fraction": freq, "post_trade_range": (lo, hi)})


# ---------------------------------------------------------------------------
# bequest statics
# ---------------------------------------------------------------------------

def _bequest_policy(instance: ProblemInstance, K: float, sign: float) -> tuple[ProblemInstance, PolicyFunctions]:
    inst = replace(instance, bequest=replace(instance.bequest, K=K))
    pol = solve(inst)
    pol.K = sign * K
    return inst, pol


def bequest_policy_matches_band_problem(instance: ProblemInstance) -> bool:
    """K = 0 with no terminal weight gives bit-identical output to the band problem."""
    from .model import BequestSpec

    zero = replace(instance, bequest=BequestSpec("mandatory", 0.0, 0.0))
    plain = replace(instance, problem="transaction_costs", bequest=BequestSpec())
    if instance.income.kind == "gaussian-jolt":
        from .model import IncomeStream

        zero = replace(zero, income=IncomeStream())
        plain = replace(plain, income=IncomeStream())
    pa, pb = solve(zero), solve(plain)
    T = instance.prefs.T
    ts = np.linspace(0.0, 0.95 * T, 7)
    w = zero.z0_initial + zero.z1_initial
    z0s = w * np.array([0.2, 0.5, 1.0, 2.0])
    z1s = w * np.array([0.0, 0.3, 0.8])
    for t in ts:
        for z0 in z0s:
            for z1 in z1s:
                for fa, fb in ((pa.value_at, pb.value_at), (pa.consumption_at, pb.consumption_at),
                               (pa.trade_amount, pb.trade_amount)):
                    a, b = fa(t, z0, z1), fb(t, z0, z1)
                    if np.asarray(a).tobytes() != np.asarray(b).tobytes():
                        return False
    return pa.band == pb.band


def check_bequest_statics(instance: ProblemInstance, cfg: PathConfig, *, K_values=None,
                          faults: Faults = Faults(), tol: Tolerances = Tolerances()) -> CheckResult:
    """Consumption and mean risky share both fall as the bequest grows."""
    from .simulate import simulate_bequest

    started = time.perf_counter()
    K = instance.bequest.K
    if K_values is None:
        K_values = [0.0, 0.5 * K, K] if K > 0 else [0.0, 0.1, 0.2]
    cons, share = [], []
    for k in K_values:
        inst, pol = _bequest_policy(instance, k, faults.bequest_sign)
        cons.append(float(pol.consumption_at(0.0, inst.z0_initial, inst.z1_initial, strict=False)))
        sim = simulate_bequest(inst, cfg, policy=pol)
        share.append(float(np.mean(sim.mean_risky_share)))
    problems = []
    dc = np.diff(cons)
    ds = np.diff(share)
    if not np.all(dc < 0):
        problems.append(f"c*(0) not strictly decreasing in K: {cons}")
    if not np.all(ds < 0):
        problems.append(f"mean risky proportion not decreasing in K: {share}")
    if not bequest_policy_matches_band_problem(instance):
        problems.append("K = 0 does not reproduce the band problem")
    measured = float(max(np.max(dc), np.max(ds)))
    return CheckResult("bequest_statics", not problems, measured, 0.0, cfg.seed,
                       "; ".join(problems), time.perf_counter() - started,
                       {"K": list(K_values), "c0": cons, "risky_share": share})


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

@dataclass
class VerificationSuite:
    instance: ProblemInstance
    cfg: PathConfig = field(default_factory=PathConfig)
    grid: Grid1D | None = None
    controls: ControlGrid | None = None
    faults: Faults = Faults()
    tolerances: Tolerances = Tolerances()
    grid_search_cfg: PathConfig | None = None
    report: list[CheckResult] = field(default_factory=list)

    def check_names(self) -> list[str]:
        kind = self.instance.problem
        names = ["value_agreement", "hjb_residual"]
        if kind == "terminal":
            names.append("grid_search")
        if kind in ("transaction_costs", "bequest"):
            names.append("band_behavior")
        if kind == "bequest":
            names.append("bequest_statics")
        return names

    def run(self) -> list[CheckResult]:
        inst, cfg, f, tol = self.instance, self.cfg, self.faults, self.tolerances
        results: list[CheckResult] = []
        for name in self.check_names():
            if name == "value_agreement":
                results += check_value_agreement(inst, self.grid, cfg, controls=self.controls,
                                                 faults=f, tol=tol)
            elif name == "hjb_residual":
                results.append(check_hjb_residual(inst, faults=f, tol=tol))
            elif name == "grid_search":
                results.append(check_grid_search(inst, self.grid_search_cfg or cfg, faults=f, tol=tol))
            elif name == "band_behavior":
                results.append(check_band_behavior(inst, cfg, faults=f, tol=tol))
            elif name == "bequest_statics":
                results.append(check_bequest_statics(inst, cfg, faults=f, tol=tol))
        self.report = sorted(results, key=lambda r: r.name)
        return self.report

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.report)

    def first_failure(self) -> CheckResult | None:
        return next((r for r in self.report if not r.passed), None)

    def summary(self) -> str:
        lines = [f"instance {instance_hash(self.instance)}  seed {self.cfg.seed}"]
        for r in self.report:
            line = f"  {r.status.upper():4s}  {r.name:22s} measured={r.measured:.4g} tol={r.tolerance:.4g}"
            if r.message:
                line += f"  ({r.message})"
            lines.append(line)
        lines.append("all checks passed" if self.passed else
                     f"FAILED: {self.first_failure().name}")
        return "\n".join(lines)


VERDICT_COLUMNS = ("name", "status", "measured", "tolerance", "seed", "instance_hash", "message")


def write_verdicts(suite: VerificationSuite, path, header: str = "") -> None:
    """One record per check. Runtimes stay out of the file so reruns are byte-identical."""
    h = instance_hash(suite.instance)
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for r in suite.report:
            w.writerow([r.name, r.status, repr(float(r.measured)), repr(float(r.tolerance)),
                        "" if r.seed is None else r.seed, h, r.message])
