from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import (
    BAND_MARKET,
    CANONICAL,
    PREFS,
    band_instance,
    bequest_instance,
    consumption_instance,
    terminal_instance,
)
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import band_by_roots, bernoulli_ode_a, present_value

from optinvest.closed_form import (
    DegenerateBandError,
    IllPosedError,
    InfeasibleBequestError,
    InsolventError,
    MuConstant,
    ProblemMismatchError,
    a_coefficient,
    bequest_adjusted_wealth,
    effective_future_wealth,
    merton_fraction,
    mu_constant,
    no_trade_band,
    signal_nu,
    solve,
    solve_bequest,
    solve_consumption,
    solve_terminal_only,
    trade_to_boundary,
)
from optinvest.model import (
    IncomeStream,
    MarketParams,
    PreferenceParams,
    TransactionCosts,
)

# Frozen oracle values (computed once by the routines in oracles.py).
A_MU_M0055_TAU10 = 2.4626831566438767   # backward DOP853, rtol 1e-13
A_BEQUEST_CANON = 1.348765578505731     # mu=-0.06375, A'=1, tau=1
N_CONST_TAU10 = 7.869386805747331       # quad of exp(-0.05 s) on [0, 10]
BAND_L_05 = 0.49751243781094534         # brentq roots of the signal, pi*=0.5, chi=0.01
BAND_H_05 = 0.5025125628140703


def test_merton_fraction_examples():
    assert merton_fraction(CANONICAL, 0.5) == pytest.approx(4.0 / 3.0, rel=1e-15)
    assert merton_fraction(MarketParams(0.05, 0.05, 0.3), 0.5) == 0.0
    assert merton_fraction(MarketParams(0.05, 0.02, 0.3), 0.5) < 0.0
    with pytest.raises(ValueError):
        merton_fraction(CANONICAL, 1.0)


def test_mu_examples():
    mu = mu_constant(CANONICAL, PREFS)
    assert mu.mu == pytest.approx(-0.055, abs=1e-15)
    assert not mu.is_zero
    rho = 0.05 * 0.5 + 0.5 * 0.06 ** 2 / (2 * 0.09 * 0.5)
    assert mu_constant(CANONICAL, PreferenceParams(0.5, rho, 1.0)).is_zero
    flat = mu_constant(MarketParams(0.05, 0.05, 0.3), PreferenceParams(0.5, 0.0, 1.0))
    assert flat.mu == pytest.approx(0.025)


def test_future_income_examples():
    prefs10 = PreferenceParams(0.5, 0.1, 10.0)
    assert effective_future_wealth(IncomeStream(), 3.0, prefs10, CANONICAL) == 0.0
    assert effective_future_wealth(IncomeStream("constant", 1.0), 10.0, prefs10, CANONICAL) == 0.0
    n = effective_future_wealth(IncomeStream("constant", 1.0), 0.0, prefs10, CANONICAL)
    assert n == pytest.approx(N_CONST_TAU10, rel=1e-13)
    assert n == pytest.approx(7.8694, abs=5e-5)
    tab = IncomeStream("tabulated", table=((0.0, 1.0), (10.0, 1.0)))
    assert effective_future_wealth(tab, 0.0, prefs10, CANONICAL) == pytest.approx(N_CONST_TAU10, rel=1e-11)


def test_future_income_tabulated_against_quadrature():
    tab = IncomeStream("tabulated", table=((0.0, 2.0), (0.4, 0.5), (1.0, 1.5)))
    for t in (0.0, 0.2, 0.7):
        expected = present_value(lambda s: tab.rate(s, 1.0), 0.05, t, 1.0)
        got = effective_future_wealth(tab, t, PREFS, CANONICAL)
        assert got == pytest.approx(expected, rel=1e-10)


def test_a_coefficient_examples():
    mu = MuConstant(-0.055, False)
    assert a_coefficient(mu, 0.5, 10.0, 10.0, 0.7) == pytest.approx(0.7, rel=1e-15)
    zero = MuConstant(0.0, True)
    assert a_coefficient(zero, 0.3, 2.0, 10.0, 0.0) == pytest.approx(8.0 ** 0.7, rel=1e-14)
    assert a_coefficient(mu, 0.5, 0.0, 10.0, 0.0) == pytest.approx(A_MU_M0055_TAU10, rel=1e-8)
    mu_b = mu_constant(BAND_MARKET, PREFS)
    assert a_coefficient(mu_b, 0.5, 0.0, 1.0, 1.0) == pytest.approx(A_BEQUEST_CANON, rel=1e-8)


def test_a_coefficient_rejects_negative_terminal():
    with pytest.raises(IllPosedError):
        a_coefficient(MuConstant(-0.05, False), 0.5, 0.0, 1.0, -1.0)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(-0.3, 0.3), gamma=st.floats(0.1, 0.9), tau=st.floats(0.01, 15.0),
       terminal_a=st.one_of(st.just(0.0), st.floats(0.0, 3.0)))
def test_a_coefficient_matches_ode(mu, gamma, tau, terminal_a):
    m = MuConstant(mu, abs(mu) < 1e-12)
    cf = a_coefficient(m, gamma, 0.0, tau, terminal_a)
    assert cf == pytest.approx(bernoulli_ode_a(mu, gamma, tau, terminal_a), rel=1e-8)


def test_mu_branch_is_continuous():
    for gamma in (0.2, 0.5, 0.8):
        for A in (0.0, 1.3):
            vals = [a_coefficient(MuConstant(mu, abs(mu) < 1e-12), gamma, 0.0, 5.0, A)
                    for mu in (-2e-12, -1e-12, -0.5e-12, 0.0, 0.5e-12, 1e-12, 2e-12)]
            assert max(vals) - min(vals) <= 1e-8 * abs(vals[3])


def test_consumption_diverges_at_horizon():
    pol = solve_consumption(consumption_instance(level=0.0, z0=1.0))
    ratios = [pol.consumption_ratio(1.0 - h) for h in (1e-2, 1e-4, 1e-6)]
    assert ratios[0] < ratios[1] < ratios[2]
    assert ratios[2] > 1e5


def test_terminal_value_examples():
    pol = solve_terminal_only(terminal_instance())
    assert pol.value_at(1.0, 4.0) == pytest.approx(2.0 * 4.0 ** 0.5 / 1.0 / 1.0, rel=1e-15)
    assert pol.value_at(0.0, 1.0) == pytest.approx(math.exp(0.045) * 2.0, rel=1e-14)
    assert pol.fraction_or_trade_at(0.3, 5.0) == pytest.approx(4.0 / 3.0)
    assert pol.consumption_at(0.3, 5.0) == 0.0


def test_consumption_policy_uses_future_income():
    inst = consumption_instance(level=1.0, z0=10.0)
    pol = solve(inst)
    n0 = effective_future_wealth(inst.income, 0.0, PREFS, CANONICAL)
    w = 10.0 + n0
    assert pol.effective_wealth(0.0, 10.0) == pytest.approx(w)
    assert pol.fraction_or_trade_at(0.0, 10.0) == pytest.approx(4.0 / 3.0 * w / 10.0)
    assert pol.consumption_at(0.0, 10.0) == pytest.approx(pol.consumption_ratio(0.0) * w)


def test_solvers_check_problem_kind():
    with pytest.raises(ProblemMismatchError):
        solve_consumption(terminal_instance())
    with pytest.raises(ValueError):
        solve(terminal_instance(prefs=PreferenceParams(1.5, 0.1, 1.0)))


def test_signal_examples():
    zero = TransactionCosts()
    assert signal_nu(0.6, 0.6, zero, "buy") == pytest.approx(0.0)
    band = no_trade_band(0.5, TransactionCosts(0.02, 0.0))
    assert signal_nu(band.L, 0.5, TransactionCosts(0.02, 0.0), "buy") == pytest.approx(0.0, abs=1e-15)
    assert signal_nu(0.4, 0.5, TransactionCosts(0.02, 0.0), "buy") > 0
    assert 0.4 < band.L


def test_band_examples():
    b = no_trade_band(0.75, TransactionCosts())
    assert b.L == b.H == 0.75
    b = no_trade_band(0.5, TransactionCosts(0.01, 0.0))
    assert b.L == pytest.approx(BAND_L_05, rel=1e-14)
    assert b.H == pytest.approx(BAND_H_05, rel=1e-14)
    for chi, chi0 in ((0.02, 0.0), (0.03, 0.01), (0.05, -0.02)):
        L, H = band_by_roots(0.6, chi, chi0)
        band = no_trade_band(0.6, TransactionCosts(chi, chi0))
        assert band.L == pytest.approx(L, rel=1e-12)
        assert band.H == pytest.approx(H, rel=1e-12)


@settings(max_examples=80, deadline=None)
@given(pi=st.floats(0.05, 0.95), chi=st.floats(0.0, 0.2), dchi=st.floats(1e-4, 0.05),
       frac=st.floats(-0.9, 0.9))
def test_band_statics(pi, chi, dchi, frac):
    chi0 = frac * chi
    b = no_trade_band(pi, TransactionCosts(chi, chi0))
    wider = no_trade_band(pi, TransactionCosts(chi + dchi, chi0))
    assert wider.L < b.L or (chi == 0 and wider.L < pi)
    assert wider.H > b.H
    assert wider.width > b.width
    if chi0 + 0.01 <= chi:
        shifted = no_trade_band(pi, TransactionCosts(chi, chi0 + 0.01))
        assert shifted.L < b.L and shifted.H < b.H


def test_band_inversion_raises():
    with pytest.raises(DegenerateBandError):
        no_trade_band(4.0 / 3.0, TransactionCosts(0.01, 0.0))


def test_band_policy_trades():
    pol = solve(band_instance(chi=0.02))
    band = pol.band
    w = 1.0
    inside = pol.fraction_or_trade_at(0.2, w * (1 - 0.75), w * 0.75)
    assert inside.action == "none"
    z1 = (band.H + 0.1) * w
    dec = pol.fraction_or_trade_at(0.2, w - z1, z1)
    assert dec.action == "sell" and dec.amount < 0
    z1n = z1 + dec.amount
    z0n = w - z1 - dec.amount - dec.cost
    assert z1n / (z0n + z1n) == pytest.approx(band.H, abs=1e-10)
    dec = pol.fraction_or_trade_at(0.2, w, 0.0)
    assert dec.action == "buy"
    z0n = w - dec.amount - dec.cost
    assert dec.amount / (z0n + dec.amount) == pytest.approx(band.L, abs=1e-10)


def test_sell_amount_against_bisection():
    from scipy.optimize import brentq

    costs = TransactionCosts(0.03, 0.01)
    z0, z1, H = 0.2, 0.9, 0.6

    def post(v):
        z1n = z1 + v
        z0n = z0 - v - (-v) * costs.sell_rate
        return z1n / (z0n + z1n) - H

    v_ref = brentq(post, -z1, 0.0, xtol=1e-15)
    assert trade_to_boundary(z1, z0 + z1, H, -costs.sell_rate) == pytest.approx(v_ref, abs=1e-12)


def test_zero_costs_collapse_to_merton():
    pol = solve(band_instance(chi=0.0))
    assert pol.band.L == pol.band.H == pytest.approx(0.75)
    frictionless = solve(consumption_instance(level=0.0, z0=1.0, market=BAND_MARKET))
    for t in (0.0, 0.5):
        assert pol.consumption_at(t, 0.4, 0.6) == pytest.approx(frictionless.consumption_at(t, 1.0))
        assert pol.value_at(t, 0.4, 0.6) == pytest.approx(frictionless.value_at(t, 1.0))


def test_bequest_adjusted_wealth_examples():
    zero = TransactionCosts()
    assert bequest_adjusted_wealth(100.0, 0.0, 0.5, zero, 30.0, 1.0) == 70.0
    assert bequest_adjusted_wealth(100.0, 0.0, 1.0, zero, 30.0, 1.0) == 100.0
    costs = TransactionCosts(0.02, 0.01)
    pol = solve(band_instance(chi=0.02, chi0=0.01))
    assert bequest_adjusted_wealth(1.0, 0.5, 0.3, costs, 0.0, 1.0) == pytest.approx(
        pol.effective_wealth(0.3, 1.0, 0.5))


def test_bequest_reduces_to_band_problem():
    from optinvest.model import BequestSpec

    inst = bequest_instance(K=0.0, A_prime=0.0, z0=1.0)
    plain = band_instance(chi=0.01)
    a, b = solve_bequest(inst), solve(plain)
    for t in (0.0, 0.4, 0.9):
        for state in ((1.0, 0.0), (0.3, 0.8), (2.0, 0.1)):
            assert a.consumption_at(t, *state) == b.consumption_at(t, *state)
            assert a.value_at(t, *state) == b.value_at(t, *state)
    small = solve_bequest(inst.with_param("bequest", BequestSpec("mandatory", 0.0, 1e-10)))
    assert small.consumption_at(0.5, 1.0, 0.0) == pytest.approx(b.consumption_at(0.5, 1.0, 0.0), rel=1e-6)


def test_bequest_consumption_falls_with_K():
    c = [solve_bequest(bequest_instance(K=K)).consumption_at(0.0, 100.0, 0.0) for K in (0, 10, 20)]
    assert c[0] > c[1] > c[2]


def test_infeasible_bequest():
    with pytest.raises(InfeasibleBequestError, match="infeasible bequest"):
        solve_bequest(bequest_instance(K=150.0))


def test_insolvent_state_raises():
    pol = solve(consumption_instance(level=0.0, z0=1.0))
    with pytest.raises(InsolventError):
        pol.value_at(0.2, -0.5)
    assert np.isnan(pol.value_at(0.2, -0.5, strict=False))


def test_fraction_decreases_in_wealth_with_income():
    pol = solve(consumption_instance(level=1.0, z0=10.0))
    xs = np.geomspace(0.5, 50.0, 30)
    u = pol.fraction_or_trade_at(0.3, xs)
    assert np.all(np.diff(u) < 0)
    assert np.all(u > pol.pi_star)


@pytest.mark.parametrize("make", [terminal_instance, consumption_instance])
def test_value_increasing_concave_and_consumption_nonnegative(make):
    pol = solve(make())
    xs = np.geomspace(0.2, 40.0, 60)
    for t in (0.0, 0.5, 0.9):
        v = pol.value_at(t, xs)
        dv = np.diff(v) / np.diff(xs)
        assert np.all(dv > 0)
        assert np.all(np.diff(dv) < 0)
        assert np.all(pol.consumption_at(t, xs) >= 0)
