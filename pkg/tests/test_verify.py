from __future__ import annotations

import csv

import numpy as np
import pytest
from conftest import (
    band_instance,
    bequest_instance,
    consumption_instance,
    terminal_instance,
)

from optinvest.hjb_fd import Grid1D
from optinvest.model import MarketParams, PreferenceParams, instance_hash
from optinvest.simulate import PathConfig
from optinvest.verify import (
    Faults,
    VerificationSuite,
    bequest_policy_matches_band_problem,
    check_band_behavior,
    check_bequest_statics,
    check_grid_search,
    check_hjb_residual,
    check_value_agreement,
    grid_search_constant_fraction,
    write_verdicts,
)

SMALL = PathConfig(20000, 100, 41)
GS = PathConfig(200000, 50, 41, "exact-lognormal")
TERMINAL_GRID = Grid1D(0.1, 10.0, 200, 2000, 1.0)


def _by_name(results):
    return {r.name: r for r in results}


def test_value_agreement_terminal_passes():
    res = _by_name(check_value_agreement(terminal_instance(), TERMINAL_GRID, SMALL))
    assert res["value_agreement.fd"].passed
    assert res["value_agreement.fd"].measured < 0.005
    assert res["value_agreement.mc"].passed


def test_value_agreement_catches_scaled_coefficient():
    res = _by_name(check_value_agreement(terminal_instance(), TERMINAL_GRID, SMALL,
                                         faults=Faults(a_scale=1.05)))
    assert not res["value_agreement.fd"].passed
    assert "disagreement" in res["value_agreement.fd"].message
    assert not res["value_agreement.mc"].passed


def test_value_agreement_with_income_passes():
    inst = consumption_instance(level=1.0, z0=10.0)
    res = check_value_agreement(inst, Grid1D(0.01, 100.0, 200, 2000, 1.0), PathConfig(10000, 100, 3))
    assert all(r.passed for r in res)


def test_value_agreement_skips_mc_with_costs():
    res = _by_name(check_value_agreement(band_instance(chi=0.01), Grid1D(0.1, 10.0, 120, 600, 1.0),
                                         PathConfig(1000, 20, 1)))
    assert res["value_agreement.fd"].passed
    assert res["value_agreement.mc"].status == "skip"


def test_grid_search_examples():
    u = np.round(np.arange(0.0, 2.0001, 0.05), 10)
    res = grid_search_constant_fraction(terminal_instance(), u, GS)
    assert 1.28 <= res.best <= 1.38
    flat = grid_search_constant_fraction(terminal_instance(market=MarketParams(0.05, 0.05, 0.3)), u, GS)
    assert flat.best == 0.0
    wide = np.arange(0.0, 10.0001, 0.25)
    best = [grid_search_constant_fraction(terminal_instance(prefs=PreferenceParams(g, 0.1, 1.0)),
                                          wide, GS).best for g in (0.5, 0.7, 0.9)]
    assert best[0] < best[1] < best[2]


def test_grid_search_check_and_fault():
    ok = check_grid_search(terminal_instance(), GS)
    assert ok.passed and ok.seed == GS.seed
    bad = check_grid_search(terminal_instance(), GS, faults=Faults(fraction_scale=1.5))
    assert not bad.passed


def test_residual_check_and_faults():
    assert check_hjb_residual(terminal_instance()).passed
    assert not check_hjb_residual(terminal_instance(), faults=Faults(fraction_scale=1.1)).passed
    assert check_hjb_residual(consumption_instance()).passed
    assert not check_hjb_residual(consumption_instance(), faults=Faults(a_scale=1.1)).passed


def test_band_check_and_fault():
    cfg = PathConfig(2000, 100, 5)
    ok = check_band_behavior(band_instance(chi=0.01), cfg)
    assert ok.passed, ok.message
    freq = ok.details["trade_step_fraction"]
    assert freq[1] < freq[0]
    bad = check_band_behavior(band_instance(chi=0.01), cfg, faults=Faults(band_shift=0.01))
    assert not bad.passed
    assert "band violation" in bad.message


def test_bequest_check_and_fault():
    cfg = PathConfig(2000, 50, 5)
    ok = check_bequest_statics(bequest_instance(), cfg)
    assert ok.passed, ok.message
    bad = check_bequest_statics(bequest_instance(), cfg, faults=Faults(bequest_sign=-1.0))
    assert not bad.passed


def test_bequest_zero_reproduces_band_problem_bitwise():
    assert bequest_policy_matches_band_problem(bequest_instance(K=20.0))


def test_suite_and_verdict_file(tmp_path):
    suite = VerificationSuite(terminal_instance(), SMALL, grid=TERMINAL_GRID, grid_search_cfg=GS)
    suite.run()
    assert suite.passed
    assert [r.name for r in suite.report] == sorted(r.name for r in suite.report)
    out = tmp_path / "verdict.csv"
    write_verdicts(suite, out, "# replay header\n")
    lines = out.read_text().splitlines()
    assert lines[0] == "# replay header"
    rows = list(csv.DictReader(lines[1:]))
    assert {r["name"] for r in rows} == {"grid_search", "hjb_residual",
                                         "value_agreement.fd", "value_agreement.mc"}
    assert all(r["instance_hash"] == instance_hash(suite.instance) for r in rows)
    assert all(r["status"] == "pass" for r in rows)
    assert "all checks passed" in suite.summary()


@pytest.mark.parametrize("make, names", [
    (consumption_instance, ["value_agreement", "hjb_residual"]),
    (band_instance, ["value_agreement", "hjb_residual", "band_behavior"]),
    (bequest_instance, ["value_agreement", "hjb_residual", "band_behavior", "bequest_statics"]),
])
def test_suite_selects_checks_by_problem(make, names):
    assert VerificationSuite(make()).check_names() == names
