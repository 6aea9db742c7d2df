from __future__ import annotations

from pathlib import Path

import pytest

from optinvest.model import (
    BequestSpec,
    IncomeStream,
    MarketParams,
    PreferenceParams,
    ProblemInstance,
    TransactionCosts,
)

ASSETS = Path(__file__).parent / "assets"

CANONICAL = MarketParams(r0=0.05, r1=0.11, s1=0.3)
BAND_MARKET = MarketParams(r0=0.05, r1=0.11, s1=0.4)
PREFS = PreferenceParams(gamma=0.5, rho=0.1, T=1.0)


def terminal_instance(**kw) -> ProblemInstance:
    return ProblemInstance("terminal", kw.pop("market", CANONICAL), kw.pop("prefs", PREFS),
                           z0_initial=kw.pop("z0", 1.0), **kw)


def consumption_instance(level: float = 1.0, z0: float = 10.0, **kw) -> ProblemInstance:
    income = IncomeStream("constant", level) if level else IncomeStream()
    return ProblemInstance("consumption", kw.pop("market", CANONICAL), kw.pop("prefs", PREFS),
                           income=income, z0_initial=z0, **kw)


def band_instance(chi: float = 0.01, chi0: float = 0.0, z0: float = 1.0, z1: float = 0.0,
                  **kw) -> ProblemInstance:
    return ProblemInstance("transaction_costs", kw.pop("market", BAND_MARKET), kw.pop("prefs", PREFS),
                           costs=TransactionCosts(chi, chi0), z0_initial=z0, z1_initial=z1, **kw)


def bequest_instance(K: float = 20.0, A_prime: float = 1.0, chi: float = 0.01, z0: float = 100.0,
                     **kw) -> ProblemInstance:
    return ProblemInstance("bequest", kw.pop("market", BAND_MARKET), kw.pop("prefs", PREFS),
                           costs=TransactionCosts(chi, 0.0), bequest=BequestSpec("mandatory", K, A_prime),
                           z0_initial=z0, **kw)


@pytest.fixture
def assets() -> Path:
    return ASSETS
