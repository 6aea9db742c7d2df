"""Analytic solutions of the four consumption-investment problems.

Every solved problem has a value function of the CRRA form

    phi(t, W) = exp(-rho t) * a(t) * W**gamma / gamma

where ``W`` is the investor's effective total wealth and ``a(t)`` solves the
Bernoulli equation ``a' + mu a + (1 - gamma) a**(gamma/(gamma-1)) = 0``.
Substituting ``a = b**(1-gamma)`` linearises it to ``b' = -mu b/(1-gamma) - 1``,
so consumption is simply ``W / b(t)``. All evaluation goes through ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate

from .model import (
    BequestSpec,
    IncomeStream,
    MarketParams,
    PreferenceParams,
    ProblemInstance,
    TransactionCosts,
    validate,
)


class IllPosedError(ValueError):
    pass


class InsolventError(ValueError):
    pass


class DegenerateBandError(ValueError):
    pass


class InfeasibleBequestError(ValueError):
    pass


class ProblemMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MuConstant:
    mu: float
    is_zero: bool


@dataclass(frozen=True)
class NoTradeBand:
    L: float
    H: float
    pi_star: float

    def contains(self, pi1, slack: float = 0.0):
        return (pi1 >= self.L - slack) & (pi1 <= self.H + slack)

    @property
    def width(self) -> float:
        return self.H - self.L


@dataclass(frozen=True)
class TradeDecision:
    action: str  # "none", "buy" or "sell"
    amount: float = 0.0
    target: float | None = None
    cost: float = 0.0


def merton_fraction(market: MarketParams, gamma: float) -> float:
    """Constant optimal risky fraction ``(r1 - r0) / (s1**2 (1 - gamma))``."""
    if gamma == 1.0:
        raise ValueError("gamma = 1 has zero risk aversion; the fraction is undefined")
    return (market.r1 - market.r0) / (market.s1 ** 2 * (1.0 - gamma))


def mu_constant(market: MarketParams, prefs: PreferenceParams) -> MuConstant:
    g = prefs.gamma
    mu = (-prefs.rho + market.r0 * g
          + g * (market.r1 - market.r0) ** 2 / (2.0 * market.s1 ** 2 * (1.0 - g)))
    scale = max(prefs.rho, market.r0, 1.0)
    return MuConstant(mu, abs(mu) < 1e-12 * scale)


def effective_future_wealth(income: IncomeStream, t: float, prefs: PreferenceParams,
                            market: MarketParams) -> float:
    """Present value at rate ``r0`` of the income still to come after ``t``."""
    T, r0 = prefs.T, market.r0
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if t == T or income.kind == "zero":
        return 0.0
    if income.kind == "constant":
        if r0 == 0.0:
            return income.level * (T - t)
        return -income.level / r0 * math.expm1(r0 * (t - T))
    points = [p for p in income.breakpoints() if t < p < T]
    if income.kind == "gaussian-jolt":
        points = [p for p in (T - 4 * income.sigma, T - income.sigma) if t < p < T]
    val, _ = integrate.quad(lambda s: income.rate(s, T) * math.exp(-r0 * (s - t)), t, T,
                            points=points or None, limit=200, epsabs=1e-13, epsrel=1e-12)
    return val


def _expm1_ratio(x):
    """``expm1(x) / x`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(safe) / safe)
    return out if out.ndim else float(out)


def bernoulli_root(mu: MuConstant, gamma: float, t, T: float, terminal_a: float):
    """``b(t) = a(t)**(1/(1-gamma))``; the consumption-to-wealth ratio is ``1/b``."""
    if terminal_a < 0:
        raise IllPosedError(f"terminal coefficient {terminal_a} is negative")
    tau = T - np.asarray(t, dtype=float)
    b_T = terminal_a ** (1.0 / (1.0 - gamma))
    if mu.is_zero:
        b = b_T + tau
    else:
        k = mu.mu / (1.0 - gamma)
        b = b_T * np.exp(k * tau) + tau * _expm1_ratio(k * tau)
    return b if np.ndim(b) else float(b)


def a_coefficient(mu: MuConstant, gamma: float, t, T: float, terminal_a: float):
    """Time factor ``a(t)`` of the value function with ``a(T) = terminal_a``.

    Raises :class:`IllPosedError` when the closed form turns negative on
    ``[t, T]``, which would make the value function lose concavity.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr > T) or np.any(t_arr < 0):
        raise ValueError("t outside [0, T]")
    b = np.asarray(bernoulli_root(mu, gamma, t_arr, T, terminal_a))
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise IllPosedError(f"a(t) is negative or undefined for mu={mu.mu}, gamma={gamma}")
    a = b ** (1.0 - gamma)
    return a if a.ndim else float(a)


def signal_nu(pi1, pi_star: float, costs: TransactionCosts, sign: str):
    """Trade signal; positive means buy pressure, negative sell pressure."""
    if sign == "buy":
        chi_v = costs.chi
    elif sign == "sell":
        chi_v = -costs.chi
    else:
        raise ValueError(f"sign must be 'buy' or 'sell', got {sign!r}")
    return (chi_v + costs.chi0) * pi_star * pi1 + pi_star - (costs.chi0 + 1.0 + chi_v) * pi1


def no_trade_band(pi_star: float, costs: TransactionCosts) -> NoTradeBand:
    den_L = costs.buy_rate * (1.0 - pi_star) + 1.0
    den_H = -costs.sell_rate * (1.0 - pi_star) + 1.0
    if den_L <= 0 or den_H <= 0:
        raise DegenerateBandError(
            f"degenerate band: denominator nonpositive for pi_star={pi_star}, "
            f"chi={costs.chi}, chi0={costs.chi0}")
    L, H = pi_star / den_L, pi_star / den_H
    if L > H:
        raise DegenerateBandError(
            f"degenerate band: L={L:.6g} > H={H:.6g}; the band formula needs "
            f"0 <= pi_star <= 1 (pi_star={pi_star:.6g})")
    return NoTradeBand(L, H, pi_star)


def liquidation_factor(z1, costs: TransactionCosts):
    """Cash value of one unit of stock when the position is closed out."""
    return np.where(np.asarray(z1) >= 0, 1.0 - costs.sell_rate, 1.0 + costs.buy_rate)


def bequest_adjusted_wealth(z0, z1, t, costs: TransactionCosts, K: float, T: float,
                            future_income=0.0):
    """Effective total wealth net of a bequest ``K`` that falls due at ``T``.

    Stock is valued at its liquidation price. Strictly before ``T`` the
    bequest is subtracted; at ``T`` the state is read as the holdings left
    after the bequest has been paid, so no offset applies.
    """
    b = liquidation_factor(z1, costs)
    offset = np.where(np.asarray(t) < T, K, 0.0)
    w = np.asarray(z0) + b * np.asarray(z1) + future_income - offset
    return w if np.ndim(w) else float(w)


def trade_to_boundary(z1, w_band, boundary: float, rate: float):
    """Trade value landing ``z1 / w_band`` on ``boundary`` after paying the fee.

    ``rate`` is the per-unit cost of the trade direction (``chi + chi0`` for
    buys, ``chi0 - chi`` signed for sells). Cash pays ``v * (1 + rate)``.
    """
    return (boundary * w_band - z1) / (1.0 + boundary * rate)


class PolicyFunctions:
    """Evaluable optimal controls and value function for one solved problem.

    Frictionless problems take the state as a single wealth ``x``; the
    transaction-cost problems take ``(z0, z1)``. Evaluators accept numpy
    arrays. ``a_scale`` and ``fraction_scale`` exist for fault injection in
    the verification harness and default to the exact solution.
    """

    def __init__(self, instance: ProblemInstance, kind: str, *,
                 a_scale: float = 1.0, fraction_scale: float = 1.0):
        self.instance = instance
        self.problem_kind = kind
        self.a_scale = a_scale
        self.fraction_scale = fraction_scale
        m, p = instance.market, instance.prefs
        self.gamma = p.gamma
        self.T = p.T
        self.mu = mu_constant(m, p)
        self.pi_star = merton_fraction(m, p.gamma)
        self.terminal_a = instance.bequest.A_prime if instance.bequest.kind == "mandatory" else 0.0
        self.K = instance.bequest.K if instance.bequest.kind == "mandatory" else 0.0
        self.band = no_trade_band(self.pi_star, instance.costs) if kind in (
            "transaction_costs", "bequest") else None
        if kind != "terminal":
            a_coefficient(self.mu, p.gamma, 0.0, p.T, self.terminal_a)

    def with_faults(self, *, a_scale: float = 1.0, fraction_scale: float = 1.0) -> "PolicyFunctions":
        return PolicyFunctions(self.instance, self.problem_kind,
                               a_scale=a_scale, fraction_scale=fraction_scale)

    # -- time factors ------------------------------------------------------

    def a(self, t):
        if self.problem_kind == "terminal":
            k = self.mu.mu + self.instance.prefs.rho
            out = np.exp(k * (self.T - np.asarray(t, dtype=float))) * self.a_scale
        else:
            out = np.asarray(a_coefficient(self.mu, self.gamma, t, self.T, self.terminal_a)) * self.a_scale
        return out if out.ndim else float(out)

    def consumption_ratio(self, t):
        """Consumption per unit of effective wealth, ``a(t)**(1/(gamma-1))``."""
        if self.problem_kind == "terminal":
            return 0.0 * np.asarray(t, dtype=float)
        b = np.asarray(bernoulli_root(self.mu, self.gamma, t, self.T, self.terminal_a))
        with np.errstate(divide="ignore"):
            out = self.a_scale ** (1.0 / (self.gamma - 1.0)) / b
        return out if out.ndim else float(out)

    def future_income(self, t) -> float:
        inc = self.instance.income
        if inc.kind == "gaussian-jolt" and self.problem_kind == "bequest":
            return 0.0
        return effective_future_wealth(inc, float(t), self.instance.prefs, self.instance.market)

    # -- wealth ------------------------------------------------------------

    def effective_wealth(self, t, *state, strict: bool = True):
        """Effective total wealth used by the value function and consumption."""
        if self.problem_kind in ("terminal", "consumption"):
            (x,) = state
            offset = self.K if t < self.T else 0.0
            w = np.asarray(x, dtype=float) + self.future_income(t) - offset
        else:
            z0, z1 = state
            w = np.asarray(bequest_adjusted_wealth(z0, z1, t, self.instance.costs, self.K,
                                                   self.T, self.future_income(t)))
        if strict and np.any(w <= 0):
            raise InsolventError(f"insolvent state: effective wealth {np.min(w):.6g} <= 0 at t={t}")
        return w if w.ndim else float(w)

    def band_wealth(self, t, z0, z1):
        """Mark-to-market wealth whose risky share is held inside the band."""
        offset = self.K if t < self.T else 0.0
        return np.asarray(z0) + np.asarray(z1) + self.future_income(t) - offset

    # -- controls and value ------------------------------------------------

    def value_at(self, t, *state, strict: bool = True):
        w = np.asarray(self.effective_wealth(t, *state, strict=strict))
        a = self.a(t)
        if self.problem_kind == "terminal":
            out = a * w ** self.gamma / self.gamma
        else:
            disc = math.exp(-self.instance.prefs.rho * t)
            out = disc * a * np.where(w > 0, w, np.nan) ** self.gamma / self.gamma
        return out if np.ndim(out) else float(out)

    def consumption_at(self, t, *state, strict: bool = True):
        w = np.asarray(self.effective_wealth(t, *state, strict=strict))
        if self.problem_kind == "terminal":
            out = np.zeros_like(w)
        else:
            out = self.consumption_ratio(t) * w
        return out if out.ndim else float(out)

    def risky_fraction(self, t, x, strict: bool = True):
        """Frictionless optimal fraction of current wealth ``x`` held in stock."""
        w = np.asarray(self.effective_wealth(t, x, strict=strict))
        out = self.fraction_scale * self.pi_star * w / np.asarray(x, dtype=float)
        return out if out.ndim else float(out)

    def trade_amount(self, t, z0, z1):
        """Vectorised projection trade; zero inside the band."""
        band = self.band
        w = self.band_wealth(t, z0, z1)
        z1 = np.asarray(z1, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            pi1 = z1 / w
        buy = trade_to_boundary(z1, w, band.L, self.instance.costs.buy_rate)
        sell = trade_to_boundary(z1, w, band.H, -self.instance.costs.sell_rate)
        v = np.where(pi1 < band.L, buy, np.where(pi1 > band.H, sell, 0.0))
        return v if v.ndim else float(v)

    def fraction_or_trade_at(self, t, *state, strict: bool = True):
        if self.problem_kind in ("terminal", "consumption"):
            (x,) = state
            if self.problem_kind == "terminal":
                return self.fraction_scale * self.pi_star + 0.0 * np.asarray(x, dtype=float)
            return self.risky_fraction(t, x, strict=strict)
        z0, z1 = state
        w = self.band_wealth(t, z0, z1)
        if strict and w <= 0:
            raise InsolventError(f"insolvent state: wealth {w:.6g} <= 0 at t={t}")
        v = float(self.trade_amount(t, z0, z1))
        costs = self.instance.costs
        if v > 0:
            return TradeDecision("buy", v, self.band.L, v * costs.buy_rate)
        if v < 0:
            return TradeDecision("sell", v, self.band.H, -v * costs.sell_rate)
        return TradeDecision("none")

    # -- reduction to a one-dimensional frictionless problem -----------------

    def transformed(self) -> "PolicyFunctions":
        """The same solution written in effective wealth ``W`` with no income.

        For the transaction-cost problems this is the frictionless problem the
        value function reduces to once the band is enforced.
        """
        return PolicyFunctions(transformed_instance(self.instance), "consumption",
                               a_scale=self.a_scale, fraction_scale=self.fraction_scale)


def transformed_instance(instance: ProblemInstance) -> ProblemInstance:
    """Frictionless, income-free instance in effective-wealth coordinates."""
    pol = PolicyFunctions(instance, instance.problem)
    if instance.problem == "terminal":
        return instance
    if instance.problem == "consumption":
        w0 = pol.effective_wealth(0.0, instance.z0_initial)
    else:
        w0 = pol.effective_wealth(0.0, instance.z0_initial, instance.z1_initial)
    bequest = BequestSpec()
    if instance.bequest.kind == "mandatory":
        bequest = BequestSpec("mandatory", 0.0, instance.bequest.A_prime)
    return replace(instance, problem="consumption", costs=TransactionCosts(),
                   income=IncomeStream(), bequest=bequest, z0_initial=w0, z1_initial=0.0)


def _require_valid(instance: ProblemInstance) -> None:
    report = validate(instance)
    if not report.ok:
        raise ValueError("; ".join(f.message for f in report.errors))


def solve_terminal_only(instance: ProblemInstance) -> PolicyFunctions:
    """Utility of terminal wealth only: constant Merton fraction, no consumption."""
    if instance.problem != "terminal":
        raise ProblemMismatchError("solve_terminal_only needs problem = terminal")
    _require_valid(instance)
    return PolicyFunctions(instance, "terminal")


def solve_consumption(instance: ProblemInstance) -> PolicyFunctions:
    if instance.problem != "consumption":
        raise ProblemMismatchError("solve_consumption needs problem = consumption")
    _require_valid(instance)
    pol = PolicyFunctions(instance, "consumption")
    pol.effective_wealth(0.0, instance.z_initial)
    return pol


def solve_transaction_costs(instance: ProblemInstance) -> PolicyFunctions:
    if instance.problem != "transaction_costs":
        raise ProblemMismatchError("solve_transaction_costs needs problem = transaction_costs")
    _require_valid(instance)
    pol = PolicyFunctions(instance, "transaction_costs")
    pol.effective_wealth(0.0, instance.z0_initial, instance.z1_initial)
    return pol


def solve_bequest(instance: ProblemInstance) -> PolicyFunctions:
    if instance.problem != "bequest":
        raise ProblemMismatchError("solve_bequest needs problem = bequest")
    _require_valid(instance)
    pol = PolicyFunctions(instance, "bequest")
    try:
        pol.effective_wealth(0.0, instance.z0_initial, instance.z1_initial)
    except InsolventError:
        w = pol.effective_wealth(0.0, instance.z0_initial, instance.z1_initial, strict=False)
        raise InfeasibleBequestError(
            f"infeasible bequest: initial effective wealth net of K={pol.K:g} is {w:.6g}") from None
    return pol


SOLVERS = {
    "terminal": solve_terminal_only,
    "consumption": solve_consumption,
    "transaction_costs": solve_transaction_costs,
    "bequest": solve_bequest,
}


def solve(instance: ProblemInstance) -> PolicyFunctions:
    try:
        solver = SOLVERS[instance.problem]
    except KeyError:
        raise ProblemMismatchError(f"unknown problem kind {instance.problem!r}") from None
    return solver(instance)
