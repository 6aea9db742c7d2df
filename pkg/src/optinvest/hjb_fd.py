"""Finite-difference HJB oracle.

``solve_backward`` marches the HJB equation backward from the terminal payoff
with an explicit, monotone scheme and a brute-force search over a discrete
control set at every node. Nodes are uniform in ``xi = log(x)`` so the
diffusion CFL limit does not depend on the wealth level. The risky fraction
enters through upwinded finite differences; consumption is handled
semi-Lagrangian (the wealth foot ``x - c dt`` is interpolated), which keeps
the scheme monotone even when optimal consumption blows up near the horizon.

``residual_scan`` is the converse check: plug a candidate value function into
the Hamiltonian and confirm the supremum over controls vanishes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .closed_form import PolicyFunctions, transformed_instance
from .model import ProblemInstance


class UnstableSchemeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_x: int
    n_t: int
    T: float

    def __post_init__(self):
        if not self.x_min > 0:
            raise ValueError("x_min must be positive")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if self.n_x < 16 or self.n_t < 16:
            raise ValueError("need n_x >= 16 and n_t >= 16")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def xi(self) -> np.ndarray:
        return np.linspace(math.log(self.x_min), math.log(self.x_max), self.n_x)

    @property
    def x(self) -> np.ndarray:
        return np.exp(self.xi)

    @property
    def d_xi(self) -> float:
        return (math.log(self.x_max) - math.log(self.x_min)) / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    def interior(self, fraction: float = 0.8) -> slice:
        """Index slice of the middle ``fraction`` of the nodes."""
        cut = int(round(self.n_x * (1.0 - fraction) / 2.0))
        return slice(cut, self.n_x - cut)


@dataclass(frozen=True)
class ControlGrid:
    """Discrete control set.

    Risky fractions run over ``[u_min, u_max]`` in steps of ``u_step``.
    Consumption candidates are ``0`` plus ``n_c`` geometric fractions of the
    largest rate the current node can afford over one time step.
    """

    u_min: float = 0.0
    u_max: float = 2.0
    u_step: float = 0.01
    n_c: int = 240
    c_floor: float = 1e-8

    @property
    def u_values(self) -> np.ndarray:
        n = int(round((self.u_max - self.u_min) / self.u_step)) + 1
        return self.u_min + self.u_step * np.arange(n)


@dataclass(frozen=True)
class ValueSurface:
    grid: Grid1D
    times: np.ndarray
    values: np.ndarray
    u: np.ndarray
    c: np.ndarray
    substeps: int
    warnings: tuple[str, ...] = ()

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def value(self, t_index: int = 0) -> np.ndarray:
        return self.values[t_index]

    def to_csv(self, path, every: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "value", "u", "c"])
            for k in range(0, len(self.times), every):
                for i, x in enumerate(self.x):
                    w.writerow([repr(float(self.times[k])), repr(float(x)),
                                repr(float(self.values[k, i])), repr(float(self.u[k, i])),
                                repr(float(self.c[k, i]))])


def hamiltonian(t, x, u, c, phi_x, phi_xx, phi_t, instance: ProblemInstance):
    """Running utility plus generator of the wealth process applied to phi."""
    m, p = instance.market, instance.prefs
    gamma = p.gamma
    y = instance.income.rate(t, p.T) if instance.problem != "terminal" else 0.0
    c = np.asarray(c, dtype=float)
    utility = np.where(c > 0, math.exp(-p.rho * t) * np.abs(c) ** gamma / gamma, 0.0)
    drift = x * (m.r0 * (1.0 - u) + m.r1 * u) + y - c
    out = utility + phi_t + drift * phi_x + 0.5 * m.s1 ** 2 * u ** 2 * x ** 2 * phi_xx
    return out if np.ndim(out) else float(out)


def fd_instance(instance: ProblemInstance) -> ProblemInstance:
    """Instance actually discretised by the oracle.

    Transaction-cost problems and bequest offsets are solved in the reduced
    effective-wealth variable; plain consumption problems keep their income.
    """
    if instance.problem in ("transaction_costs", "bequest"):
        return transformed_instance(instance)
    if instance.problem == "consumption" and instance.bequest.K > 0:
        return transformed_instance(instance)
    return instance


def terminal_payoff(instance: ProblemInstance, x):
    p = instance.prefs
    x = np.asarray(x, dtype=float)
    if instance.problem == "terminal":
        return x ** p.gamma / p.gamma
    if instance.bequest.kind == "mandatory":
        w = np.maximum(x - instance.bequest.K, 0.0)
        return math.exp(-p.rho * p.T) * instance.bequest.A_prime * w ** p.gamma / p.gamma
    return np.zeros_like(x)


def solve_backward(instance: ProblemInstance, grid: Grid1D, controls: ControlGrid | None = None,
                   *, consumption: bool | None = None, terminal=None,
                   max_substeps: int = 2_000_000, concavity_tol: float = 1e-9) -> ValueSurface:
    """Backward explicit solve of the HJB equation on ``grid``.

    ``consumption`` defaults to on for every problem except terminal wealth.
    ``terminal`` may override the payoff (a callable of ``x``), which the
    comparison-principle tests use.
    """
    controls = controls or ControlGrid()
    inst = fd_instance(instance)
    m, p = inst.market, inst.prefs
    if abs(grid.T - p.T) > 1e-12 * p.T:
        raise ValueError("grid horizon differs from the instance horizon")
    consume = inst.problem != "terminal" if consumption is None else consumption
    gamma, s2 = p.gamma, m.s1 ** 2

    x = grid.x
    dxi = grid.d_xi
    us = controls.u_values[:, None]
    diff_xi = 0.5 * s2 * us ** 2
    drift_base = m.r0 + (m.r1 - m.r0) * us - diff_xi

    income_max = 0.0
    if inst.problem != "terminal":
        ts = np.linspace(0.0, p.T, 257)
        income_max = float(np.max(np.abs(inst.income.rate(ts, p.T))))
    rate_bound = float(np.max(2.0 * diff_xi / dxi ** 2 + (np.abs(drift_base) + income_max / x[0]) / dxi))
    dt_stable = 0.95 / rate_bound if rate_bound > 0 else grid.dt
    sub = max(1, math.ceil(grid.dt / dt_stable))
    if sub * grid.n_t > max_substeps:
        raise UnstableSchemeError(
            f"unstable: {sub * grid.n_t} sub-steps needed, budget is {max_substeps}")
    h = grid.dt / sub

    # Without income the problem is homogeneous of degree gamma in wealth and
    # zero wealth is absorbing, so the consumption foot may run below x_min
    # and is extended there by that scaling.
    zero_floor = inst.problem == "terminal" or inst.income.kind == "zero"
    frac = np.concatenate(([0.0], np.geomspace(controls.c_floor, 1.0, controls.n_c)))[:, None]
    c_cap = (x if zero_floor else x - x[0]) / h
    c_cand = frac * c_cap[None, :]
    x_foot = x[None, :] - c_cand * h
    below = x_foot < x[0]
    below_w = np.where(below, (np.maximum(x_foot, 0.0) / x[0]) ** gamma, 0.0)
    pos = (np.log(np.maximum(x_foot, x[0])) - grid.xi[0]) / dxi
    lo = np.clip(np.floor(pos).astype(int), 0, grid.n_x - 2)
    s_ = np.clip(pos - lo, 0.0, 1.0)
    h00 = 2 * s_ ** 3 - 3 * s_ ** 2 + 1
    h10 = s_ ** 3 - 2 * s_ ** 2 + s_
    h01 = -2 * s_ ** 3 + 3 * s_ ** 2
    h11 = s_ ** 3 - s_ ** 2
    util_base = np.where(c_cand > 0, c_cand ** gamma / gamma, 0.0) * h

    phi = (terminal(x) if terminal is not None else terminal_payoff(inst, x)).astype(float)
    values = np.empty((grid.n_t + 1, grid.n_x))
    u_out = np.zeros_like(values)
    c_out = np.zeros_like(values)
    values[-1] = phi
    times = np.linspace(0.0, p.T, grid.n_t + 1)
    warnings: list[str] = []

    for n in range(grid.n_t - 1, -1, -1):
        for s in range(sub):
            t_now = times[n + 1] - s * h
            d_fwd = np.empty_like(phi)
            d_bwd = np.empty_like(phi)
            d_fwd[:-1] = (phi[1:] - phi[:-1]) / dxi
            d_fwd[-1] = d_fwd[-2]
            d_bwd[1:] = d_fwd[:-1]
            d_bwd[0] = d_fwd[0]
            d2 = np.empty_like(phi)
            d2[1:-1] = (phi[2:] - 2.0 * phi[1:-1] + phi[:-2]) / dxi ** 2
            d2[0], d2[-1] = d2[1], d2[-2]

            y = inst.income.rate(t_now, p.T) if inst.problem != "terminal" else 0.0
            drift = drift_base + y / x[None, :]
            d1 = np.where(drift > 0, d_fwd[None, :], d_bwd[None, :])
            h_u = drift * d1 + diff_xi * d2[None, :]
            iu = np.argmax(h_u, axis=0)
            best_u = h_u[iu, np.arange(grid.n_x)]

            best_c = np.zeros_like(phi)
            ic = np.zeros(grid.n_x, dtype=int)
            if consume:
                slope = np.empty_like(phi)
                slope[1:-1] = (phi[2:] - phi[:-2]) / 2.0
                slope[0], slope[-1] = phi[1] - phi[0], phi[-1] - phi[-2]
                foot = (h00 * phi[lo] + h10 * slope[lo] + h01 * phi[lo + 1] + h11 * slope[lo + 1])
                foot = np.where(below, below_w * phi[0], foot)
                gain = math.exp(-p.rho * t_now) * util_base + foot - phi[None, :]
                ic = np.argmax(gain, axis=0)
                best_c = gain[ic, np.arange(grid.n_x)]

            phi = phi + h * best_u + best_c
        values[n] = phi
        u_out[n] = controls.u_values[iu]
        c_out[n] = c_cand[ic, np.arange(grid.n_x)] if consume else 0.0

        if np.any(np.diff(phi) < -concavity_tol * np.max(np.abs(phi))):
            msg = f"nonmonotone slice at t={times[n]:.6g}"
            if msg not in warnings:
                warnings.append(msg)
    u_out[-1] = u_out[-2]
    c_out[-1] = c_out[-2]
    return ValueSurface(grid, times, values, u_out, c_out, sub, tuple(warnings[:5]))


# ---------------------------------------------------------------------------
# residual scan
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    states: list[tuple[float, float]]
    residuals: np.ndarray
    u_argmax: np.ndarray
    u_policy: np.ndarray
    c_argmax: np.ndarray
    c_policy: np.ndarray
    u_step: float
    c_steps: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def max_residual(self) -> float:
        ok = ~self.failed
        return float(np.max(np.abs(self.residuals[ok]))) if ok.any() else math.nan

    @property
    def u_gap_steps(self) -> np.ndarray:
        return np.abs(self.u_argmax - self.u_policy) / self.u_step

    @property
    def c_gap_steps(self) -> np.ndarray:
        return np.abs(self.c_argmax - self.c_policy) / self.c_steps

    def control_gap_steps(self) -> float:
        ok = ~self.failed
        if not ok.any():
            return math.nan
        return float(max(np.max(self.u_gap_steps[ok]), np.max(self.c_gap_steps[ok])))

    def passed(self, tol: float = 1e-6) -> bool:
        return (not self.failed.any() and self.max_residual <= tol
                and self.control_gap_steps() <= 1.0 + 1e-9)


def _derivatives(value, t: float, x: float, T: float):
    hx = 1e-4 * x
    ht = 1e-5 * T
    v0 = value(t, x)
    vp, vm = value(t, x + hx), value(t, x - hx)
    phi_x = (vp - vm) / (2 * hx)
    hx2 = 1e-3 * x
    phi_xx = (value(t, x + hx2) - 2 * v0 + value(t, x - hx2)) / hx2 ** 2
    phi_t = (value(t + ht, x) - value(t - ht, x)) / (2 * ht)
    return v0, phi_x, phi_xx, phi_t


def _grid_then_refine(objective, lo: float, hi: float, step: float, *,
                      floor: float | None = None, n_max: int = 100_000):
    """Exhaustive grid maximum, expanded while it sits on an edge, then polished.

    Returns ``(grid_argmax, refined_max)``. The refinement runs a bounded
    scalar maximisation between the neighbours of the grid argmax.
    """
    for _ in range(40):
        n = int(round((hi - lo) / step)) + 1
        if n > n_max:
            break
        grid = lo + step * np.arange(n)
        vals = objective(grid)
        k = int(np.argmax(vals))
        if 0 < k < n - 1:
            break
        span = hi - lo
        if k == n - 1:
            hi += span
        elif k == 0 and (floor is None or lo > floor):
            lo = lo - span if floor is None else max(floor, lo - span)
        else:
            break
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n - 1)]
    best = vals[k]
    if b > a:
        res = optimize.minimize_scalar(lambda z: -float(objective(np.array([z]))[0]),
                                       bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-12 * max(1.0, abs(b))})
        best = max(best, -res.fun)
    return float(grid[k]), float(best)


def residual_scan(policy: PolicyFunctions, instance: ProblemInstance | None = None,
                  sample_states=None, controls: ControlGrid | None = None,
                  n_c: int = 401) -> ResidualReport:
    """Sup-over-controls HJB residual of ``policy.value_at`` at sample states.

    Derivatives are central finite differences of the candidate value
    function. Transaction-cost solutions are scanned in their reduced
    effective-wealth form. Residuals are reported relative to ``|phi|``.
    """
    controls = controls or ControlGrid()
    if policy.problem_kind in ("transaction_costs", "bequest") or policy.K > 0:
        policy = policy.transformed()
    inst = policy.instance
    m, p = inst.market, inst.prefs
    if sample_states is None:
        sample_states = default_sample_states(inst)
    consume = policy.problem_kind != "terminal"

    n = len(sample_states)
    residuals = np.full(n, np.nan)
    u_arg, u_pol = np.full(n, np.nan), np.full(n, np.nan)
    c_arg, c_pol = np.zeros(n), np.zeros(n)
    c_steps = np.ones(n)
    failed = np.zeros(n, dtype=bool)
    for k, (t, x) in enumerate(sample_states):
        try:
            v0, phi_x, phi_xx, phi_t = _derivatives(policy.value_at, t, x, p.T)
            y = inst.income.rate(t, p.T) if inst.problem != "terminal" else 0.0
            base = phi_t + (x * m.r0 + y) * phi_x

            def u_part(u):
                return x * (m.r1 - m.r0) * u * phi_x + 0.5 * m.s1 ** 2 * u ** 2 * x ** 2 * phi_xx

            u_star, u_best = _grid_then_refine(u_part, controls.u_min, controls.u_max, controls.u_step)
            c_best = 0.0
            if consume:
                disc = math.exp(-p.rho * t)

                def c_part(c):
                    c = np.asarray(c, dtype=float)
                    return disc * np.maximum(c, 0.0) ** p.gamma / p.gamma - c * phi_x

                c_hi = 2.0 * x
                c_step = c_hi / (n_c - 1)
                c_star, c_best = _grid_then_refine(c_part, 0.0, c_hi, c_step, floor=0.0)
                c_arg[k] = c_star
                c_pol[k] = policy.consumption_at(t, x)
                c_steps[k] = c_step
            residuals[k] = (base + u_best + c_best) / abs(v0)
            u_arg[k] = u_star
            u_pol[k] = float(policy.fraction_or_trade_at(t, x))
        except (ValueError, FloatingPointError, ZeroDivisionError):
            failed[k] = True
        if not np.isfinite(residuals[k]):
            failed[k] = True
    return ResidualReport(list(sample_states), residuals, u_arg, u_pol, c_arg, c_pol,
                          controls.u_step, c_steps, failed)


def default_sample_states(instance: ProblemInstance, n_t: int = 5, n_x: int = 5):
    T = instance.prefs.T
    z = instance.z_initial
    ts = np.linspace(0.05 * T, 0.85 * T, n_t)
    xs = z * np.geomspace(0.5, 2.0, n_x)
    return [(float(t), float(x)) for t in ts for x in xs]
