"""Monte Carlo evaluation of consumption-investment policies.

Wealth is stepped on a uniform time grid with Brownian increments drawn from
:mod:`optinvest.streams`, so a rerun with the same seed is bit-identical and
two policies run with the same seed see common random numbers. Running
utility is accumulated with the left-endpoint rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .closed_form import (
    NoTradeBand,
    PolicyFunctions,
    effective_future_wealth,
    liquidation_factor,
    no_trade_band,
    trade_to_boundary,
)
from .model import ProblemInstance, transaction_cost
from .streams import path_blocks, path_normals

SCHEMES = ("euler-maruyama", "exact-lognormal")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class PathConfig:
    n_paths: int = 10_000
    n_steps: int = 250
    seed: int = 20140801
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if self.n_paths < 2 or self.n_steps < 1:
            raise ValueError("need n_paths >= 2 and n_steps >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class SimResult:
    j_mean: float
    j_stderr: float
    terminal_mean: float
    terminal_std: float
    terminal_quantiles: dict[float, float]
    n_paths: int
    insolvent_paths: int = 0
    trade_counts: np.ndarray | None = None
    trade_costs: np.ndarray | None = None
    trade_step_fraction: float = 0.0
    post_trade_range: tuple[float, float] = (math.nan, math.nan)
    bequest_shortfall_prob: float = math.nan
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_consumption: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_risky_share: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: list[tuple] = field(default_factory=list)
    j_paths: np.ndarray | None = None

    def paired_stderr(self, other: "SimResult") -> float:
        """Standard error of ``self.j_mean - other.j_mean`` over shared paths."""
        d = self.j_paths - other.j_paths
        return float(np.std(d, ddof=1) / math.sqrt(len(d)))

    @property
    def mean_trades(self) -> float:
        return float(np.mean(self.trade_counts)) if self.trade_counts is not None else 0.0

    @property
    def mean_cost_paid(self) -> float:
        return float(np.mean(self.trade_costs)) if self.trade_costs is not None else 0.0

    def summary_row(self) -> dict[str, float]:
        row = {
            "j_mean": self.j_mean,
            "j_stderr": self.j_stderr,
            "terminal_mean": self.terminal_mean,
            "terminal_std": self.terminal_std,
        }
        for q, v in self.terminal_quantiles.items():
            row[f"terminal_q{int(round(q * 100)):02d}"] = v
        row["insolvent_paths"] = float(self.insolvent_paths)
        row["bequest_shortfall_prob"] = self.bequest_shortfall_prob
        if self.trade_counts is not None:
            row["trade_events"] = self.mean_trades
            row["trade_cost_paid"] = self.mean_cost_paid
            row["trade_step_fraction"] = self.trade_step_fraction
        return row


TRACE_COLUMNS = ("path", "t", "z0", "z1", "pi1", "c", "trade", "cost")


def write_trace_csv(result: SimResult, path, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in result.trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


class ConstantPolicy:
    """Fixed risky fraction and consumption rate; for perturbation tests."""

    def __init__(self, fraction: float, consumption: float = 0.0, problem_kind: str = "terminal"):
        self.fraction = fraction
        self.consumption = consumption
        self.problem_kind = problem_kind

    def fraction_or_trade_at(self, t, x, strict: bool = True):
        return np.full_like(np.asarray(x, dtype=float), self.fraction)

    def consumption_at(self, t, x, strict: bool = True):
        return np.full_like(np.asarray(x, dtype=float), self.consumption)


def _terminal_utility(instance: ProblemInstance, wealth: np.ndarray) -> np.ndarray:
    p = instance.prefs
    if instance.problem == "terminal":
        return np.where(wealth > 0, np.maximum(wealth, 0.0) ** p.gamma / p.gamma, 0.0)
    if instance.bequest.kind == "mandatory":
        excess = np.maximum(wealth - instance.bequest.K, 0.0)
        return math.exp(-p.rho * p.T) * instance.bequest.A_prime * excess ** p.gamma / p.gamma
    return np.zeros_like(wealth)


def _stats(j: np.ndarray, wealth: np.ndarray) -> dict:
    return dict(
        j_paths=j,
        j_mean=float(np.mean(j)),
        j_stderr=float(np.std(j, ddof=1) / math.sqrt(len(j))),
        terminal_mean=float(np.mean(wealth)),
        terminal_std=float(np.std(wealth, ddof=1)),
        terminal_quantiles={q: float(v) for q, v in zip(QUANTILES, np.quantile(wealth, QUANTILES))},
    )


def _income_table(instance: ProblemInstance, times: np.ndarray, skip_jolt: bool):
    inc = instance.income
    if instance.problem == "terminal" or (skip_jolt and inc.kind == "gaussian-jolt"):
        return np.zeros_like(times), np.zeros_like(times)
    y = np.asarray(inc.rate(times, instance.prefs.T), dtype=float)
    n = np.array([effective_future_wealth(inc, float(t), instance.prefs, instance.market)
                  for t in times])
    return y, n


def simulate_frictionless(instance: ProblemInstance, policy, cfg: PathConfig,
                          trace_paths: int = 0) -> SimResult:
    """Simulate total wealth under a frictionless policy.

    A path whose effective wealth (holdings plus discounted future income)
    reaches zero before the horizon is flagged insolvent and stops accruing
    utility.
    """
    if not instance.costs.is_zero:
        raise ValueError("simulate_frictionless needs zero transaction costs")
    m, p = instance.market, instance.prefs
    T, N = p.T, cfg.n_steps
    dt = T / N
    sq = math.sqrt(dt)
    times = np.linspace(0.0, T, N + 1)
    y, fut = _income_table(instance, times, skip_jolt=False)
    K = instance.bequest.K if instance.bequest.kind == "mandatory" else 0.0
    consumes = getattr(policy, "problem_kind", "consumption") != "terminal"
    disc = np.exp(-p.rho * times)

    j_all = np.empty(cfg.n_paths)
    zT_all = np.empty(cfg.n_paths)
    insolvent = 0
    c_sum = np.zeros(N)
    u_sum = np.zeros(N)
    alive_count = np.zeros(N)
    trace: list[tuple] = []
    for start, size in path_blocks(cfg.n_paths):
        dB = path_normals(cfg.seed, start, size, N)
        z = np.full(size, instance.z_initial)
        j = np.zeros(size)
        alive = np.ones(size, dtype=bool)
        for n in range(N):
            t = times[n]
            u = np.where(alive, policy.fraction_or_trade_at(t, np.where(alive, z, 1.0), strict=False), 0.0)
            c = np.zeros(size)
            if consumes:
                c = np.where(alive, policy.consumption_at(t, np.where(alive, z, 1.0), strict=False), 0.0)
                j += disc[n] * np.where(c > 0, np.maximum(c, 0.0) ** p.gamma / p.gamma, 0.0) * dt
            c_sum[n] += c.sum()
            u_sum[n] += np.where(alive, u, 0.0).sum()
            alive_count[n] += alive.sum()
            if cfg.scheme == "euler-maruyama":
                z_new = z + (z * (m.r0 + (m.r1 - m.r0) * u) + y[n] - c) * dt + z * m.s1 * u * sq * dB[n]
            else:
                growth = (m.r0 + (m.r1 - m.r0) * u - 0.5 * (m.s1 * u) ** 2) * dt + m.s1 * u * sq * dB[n]
                z_new = z * np.exp(growth) + (y[n] - c) * dt
            if start == 0 and trace_paths:
                for k in range(min(trace_paths, size)):
                    trace.append((k, t, z[k], 0.0, u[k], c[k], 0.0, 0.0))
            z = np.where(alive, z_new, z)
            if n + 1 < N:
                broke = alive & (z + fut[n + 1] - K <= 0)
            elif instance.problem == "terminal":
                broke = alive & (z <= 0)
            else:
                broke = np.zeros(size, dtype=bool)
            insolvent += int(broke.sum())
            alive &= ~broke
        j += np.where(alive, _terminal_utility(instance, z), 0.0)
        j_all[start:start + size] = j
        zT_all[start:start + size] = z
    res = SimResult(n_paths=cfg.n_paths, insolvent_paths=insolvent, times=times[:-1],
                    mean_consumption=c_sum / cfg.n_paths,
                    mean_risky_share=u_sum / np.maximum(alive_count, 1),
                    trace=trace, **_stats(j_all, zT_all))
    if instance.bequest.kind == "mandatory":
        res.bequest_shortfall_prob = float(np.mean(zT_all < instance.bequest.K))
    return res


def simulate_band(instance: ProblemInstance, band: NoTradeBand, policy: PolicyFunctions,
                  cfg: PathConfig, trace_paths: int = 0, explicit_jolt: bool = False) -> SimResult:
    """Simulate cash and stock holdings under the no-trade band policy.

    Each step consumes at the policy's rate, evolves both holdings without
    trading, then projects the risky share ``z1 / W`` back onto the nearest
    band edge if it has left ``[band.L, band.H]``. ``W`` is cash plus stock
    plus discounted future income, less any outstanding bequest. The trade
    fee is paid from cash. ``explicit_jolt`` pays a gaussian-jolt bequest
    through the income stream instead of deducting it at the horizon.
    """
    m, p, costs = instance.market, instance.prefs, instance.costs
    T, N = p.T, cfg.n_steps
    dt = T / N
    sq = math.sqrt(dt)
    times = np.linspace(0.0, T, N + 1)
    jolt = explicit_jolt and instance.income.kind == "gaussian-jolt"
    y, fut = _income_table(instance, times, skip_jolt=not jolt)
    if jolt:
        fut = np.zeros_like(fut)
    K = instance.bequest.K if instance.bequest.kind == "mandatory" else 0.0
    K_due = 0.0 if jolt else K
    offset = np.where(times < T, K_due, 0.0)
    disc = np.exp(-p.rho * times)

    j_all = np.empty(cfg.n_paths)
    zT_all = np.empty(cfg.n_paths)
    counts = np.zeros(cfg.n_paths, dtype=np.int64)
    paid = np.zeros(cfg.n_paths)
    insolvent = 0
    trade_steps = 0
    post_lo, post_hi = math.inf, -math.inf
    c_sum = np.zeros(N)
    share_sum = np.zeros(N)
    alive_count = np.zeros(N)
    trace: list[tuple] = []

    def project(n, z0, z1, alive):
        nonlocal trade_steps, post_lo, post_hi
        w = z0 + z1 + fut[n] - offset[n]
        with np.errstate(divide="ignore", invalid="ignore"):
            pi1 = z1 / w
        buy = alive & (pi1 < band.L)
        sell = alive & (pi1 > band.H)
        v = np.where(buy, trade_to_boundary(z1, w, band.L, costs.buy_rate),
                     np.where(sell, trade_to_boundary(z1, w, band.H, -costs.sell_rate), 0.0))
        fee = transaction_cost(v, costs)
        z1 = z1 + v
        z0 = z0 - v - fee
        traded = buy | sell
        if traded.any():
            w_new = z0 + z1 + fut[n] - offset[n]
            pi_new = z1[traded] / w_new[traded]
            post_lo = min(post_lo, float(pi_new.min()))
            post_hi = max(post_hi, float(pi_new.max()))
        trade_steps += int(traded.sum())
        return z0, z1, v, fee, traded

    for start, size in path_blocks(cfg.n_paths):
        dB = path_normals(cfg.seed, start, size, N)
        z0 = np.full(size, float(instance.z0_initial))
        z1 = np.full(size, float(instance.z1_initial))
        j = np.zeros(size)
        alive = np.ones(size, dtype=bool)
        cnt = np.zeros(size, dtype=np.int64)
        cost = np.zeros(size)
        z0, z1, last_v, last_fee, traded = project(0, z0, z1, alive)
        cnt += traded
        cost += last_fee
        for n in range(N):
            t = times[n]
            c = np.where(alive, policy.consumption_at(t, z0, z1, strict=False), 0.0)
            c = np.where(np.isfinite(c), c, 0.0)
            j += disc[n] * np.where(c > 0, np.maximum(c, 0.0) ** p.gamma / p.gamma, 0.0) * dt
            c_sum[n] += c.sum()
            tot = z0 + z1
            share_sum[n] += np.where(alive, z1 / np.where(tot != 0, tot, 1.0), 0.0).sum()
            alive_count[n] += alive.sum()
            if start == 0 and trace_paths:
                w = z0 + z1 + fut[n] - offset[n]
                for k in range(min(trace_paths, size)):
                    trace.append((k, t, z0[k], z1[k], z1[k] / w[k], c[k], last_v[k], last_fee[k]))
            z0_new = z0 + (m.r0 * z0 + y[n] - c) * dt
            if cfg.scheme == "euler-maruyama":
                z1_new = z1 + z1 * (m.r1 * dt + m.s1 * sq * dB[n])
            else:
                z1_new = z1 * np.exp((m.r1 - 0.5 * m.s1 ** 2) * dt + m.s1 * sq * dB[n])
            z0 = np.where(alive, z0_new, z0)
            z1 = np.where(alive, z1_new, z1)
            last_v = np.zeros(size)
            last_fee = np.zeros(size)
            if n + 1 < N:
                w_eff = z0 + liquidation_factor(z1, costs) * z1 + fut[n + 1] - offset[n + 1]
                broke = alive & (w_eff <= 0)
                insolvent += int(broke.sum())
                alive &= ~broke
                z0, z1, last_v, last_fee, traded = project(n + 1, z0, z1, alive)
                cnt += traded
                cost += last_fee
        z_T = z0 + liquidation_factor(z1, costs) * z1
        if jolt:
            term_inst = instance.with_param("bequest.K", 0.0)
            j += np.where(alive, _terminal_utility(term_inst, z_T), 0.0)
        else:
            j += np.where(alive, _terminal_utility(instance, z_T), 0.0)
        j_all[start:start + size] = j
        zT_all[start:start + size] = z_T
        counts[start:start + size] = cnt
        paid[start:start + size] = cost

    res = SimResult(n_paths=cfg.n_paths, insolvent_paths=insolvent, trade_counts=counts,
                    trade_costs=paid, trade_step_fraction=trade_steps / (cfg.n_paths * N),
                    post_trade_range=(post_lo, post_hi), times=times[:-1],
                    mean_consumption=c_sum / cfg.n_paths,
                    mean_risky_share=share_sum / np.maximum(alive_count, 1),
                    trace=trace, **_stats(j_all, zT_all))
    if instance.bequest.kind == "mandatory":
        res.bequest_shortfall_prob = float(np.mean(zT_all < (0.0 if jolt else K)))
    return res


def simulate_bequest(instance: ProblemInstance, cfg: PathConfig, policy: PolicyFunctions | None = None,
                     trace_paths: int = 0, explicit_jolt: bool = False) -> SimResult:
    """Band simulation of the mandatory-bequest problem with shortfall statistics."""
    from .closed_form import solve_bequest

    if instance.bequest.kind != "mandatory":
        raise ValueError("simulate_bequest needs a mandatory bequest")
    policy = policy or solve_bequest(instance)
    band = no_trade_band(policy.pi_star, instance.costs)
    return simulate_band(instance, band, policy, cfg, trace_paths=trace_paths,
                         explicit_jolt=explicit_jolt)


def constant_fraction_utilities(instance: ProblemInstance, fractions, cfg: PathConfig) -> np.ndarray:
    """Per-path terminal utility for each constant fraction, shape ``(len(fractions), n_paths)``.

    Only for the terminal-wealth problem. Every candidate sees the same
    Brownian paths. Under ``exact-lognormal`` a constant fraction depends on
    the path only through the Brownian endpoint, so one pass over the draws
    serves all candidates. Under ``euler-maruyama`` the product of step
    factors is formed per candidate.
    """
    if instance.problem != "terminal":
        raise ValueError("constant-fraction search applies to the terminal-wealth problem")
    m, p = instance.market, instance.prefs
    T, N = p.T, cfg.n_steps
    dt = T / N
    sq = math.sqrt(dt)
    u = np.asarray(fractions, dtype=float)
    out = np.empty((len(u), cfg.n_paths))
    for start, size in path_blocks(cfg.n_paths):
        dB = path_normals(cfg.seed, start, size, N)
        if cfg.scheme == "exact-lognormal":
            b_T = sq * dB.sum(axis=0)
            log_z = ((m.r0 + (m.r1 - m.r0) * u - 0.5 * (m.s1 * u) ** 2) * T)[:, None] \
                + (m.s1 * u)[:, None] * b_T[None, :]
            z = instance.z_initial * np.exp(log_z)
        else:
            z = np.full((len(u), size), float(instance.z_initial))
            drift = (1.0 + (m.r0 + (m.r1 - m.r0) * u) * dt)[:, None]
            vol = (m.s1 * u * sq)[:, None]
            for n in range(N):
                z *= drift + vol * dB[n][None, :]
        out[:, start:start + size] = np.where(z > 0, np.maximum(z, 0.0) ** p.gamma / p.gamma, 0.0)
    return out
