"""Problem parameters, validation and scenario serialization.

All types are frozen dataclasses so a :class:`ProblemInstance` can be shared
freely between the solvers, the simulator and the verification harness.
Money and time are plain floats in model units.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

PROBLEM_KINDS = ("terminal", "consumption", "transaction_costs", "bequest")
INCOME_KINDS = ("zero", "constant", "tabulated", "gaussian-jolt")
BEQUEST_KINDS = ("none", "mandatory")


@dataclass(frozen=True)
class MarketParams:
    r0: float
    r1: float
    s1: float


@dataclass(frozen=True)
class TransactionCosts:
    """Proportional costs: ``chi`` is the average fee, ``chi0`` the stock premium.

    A purchase of value ``v > 0`` costs ``v * (chi + chi0)``, a sale costs
    ``|v| * (chi - chi0)``.
    """

    chi: float = 0.0
    chi0: float = 0.0

    @property
    def buy_rate(self) -> float:
        return self.chi + self.chi0

    @property
    def sell_rate(self) -> float:
        return self.chi - self.chi0

    @property
    def is_zero(self) -> bool:
        return self.chi == 0.0 and self.chi0 == 0.0


@dataclass(frozen=True)
class PreferenceParams:
    gamma: float
    rho: float
    T: float


@dataclass(frozen=True)
class BequestSpec:
    kind: str = "none"
    K: float = 0.0
    A_prime: float = 0.0


@dataclass(frozen=True)
class IncomeStream:
    """Deterministic income rate ``y(t)``.

    ``tabulated`` streams are linearly interpolated between samples.
    ``gaussian-jolt`` is the smoothed outflow of ``K`` concentrated just
    before the horizon; it is a diagnostic profile only.
    """

    kind: str = "zero"
    level: float = 0.0
    table: tuple[tuple[float, float], ...] = ()
    sigma: float = 0.0
    K: float = 0.0

    def rate(self, t, T: float):
        """Evaluate ``y(t)``; accepts scalars or arrays."""
        t = np.asarray(t, dtype=float)
        if self.kind == "zero":
            out = np.zeros_like(t)
        elif self.kind == "constant":
            out = np.full_like(t, self.level)
        elif self.kind == "tabulated":
            ts, ys = zip(*self.table)
            out = np.interp(t, ts, ys)
        elif self.kind == "gaussian-jolt":
            s2 = self.sigma * self.sigma
            out = -self.K * (T - t) / s2 * np.exp(-((t - T) ** 2) / (2.0 * s2))
        else:
            raise ValueError(f"unknown income kind {self.kind!r}")
        return out if out.ndim else float(out)

    def breakpoints(self) -> list[float]:
        if self.kind == "tabulated":
            return [t for t, _ in self.table]
        return []


@dataclass(frozen=True)
class ProblemInstance:
    """One fully specified consumption-investment problem.

    ``problem`` selects which of the four control problems the instance
    targets: terminal-wealth only, consumption with income, consumption under
    transaction costs, or transaction costs with a mandatory bequest.
    """

    problem: str
    market: MarketParams
    prefs: PreferenceParams
    costs: TransactionCosts = field(default_factory=TransactionCosts)
    income: IncomeStream = field(default_factory=IncomeStream)
    bequest: BequestSpec = field(default_factory=BequestSpec)
    z0_initial: float = 1.0
    z1_initial: float = 0.0

    @property
    def z_initial(self) -> float:
        return self.z0_initial + self.z1_initial

    def with_param(self, name: str, value) -> "ProblemInstance":
        """Return a copy with one dotted field replaced, e.g. ``costs.chi``."""
        if "." not in name:
            if name not in {f.name for f in fields(self)}:
                raise KeyError(name)
            return replace(self, **{name: value})
        section, key = name.split(".", 1)
        if section == "initial":
            return self.with_param(key, value)
        if section not in {f.name for f in fields(self)}:
            raise KeyError(name)
        sub = getattr(self, section)
        if key not in {f.name for f in fields(sub)}:
            raise KeyError(name)
        return replace(self, **{section: replace(sub, **{key: value})})


@dataclass(frozen=True)
class Finding:
    field: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Finding, ...] = ()
    warnings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def messages(self) -> list[str]:
        return [f"error: {f.message}" for f in self.errors] + [
            f"warning: {f.message}" for f in self.warnings
        ]


def validate(instance: ProblemInstance) -> ValidationReport:
    """Collect every violated invariant of ``instance``.

    Hard violations land in ``errors``; relaxations that are still solvable
    (the shortselling regime ``r0 >= r1``) land in ``warnings``.
    """
    errors: list[Finding] = []
    warnings: list[Finding] = []
    m, c, p = instance.market, instance.costs, instance.prefs
    inc, beq = instance.income, instance.bequest

    if instance.problem not in PROBLEM_KINDS:
        errors.append(Finding("problem", f"unknown problem kind {instance.problem!r}"))
    for name, val in (("market.r0", m.r0), ("market.r1", m.r1), ("market.s1", m.s1),
                      ("costs.chi", c.chi), ("costs.chi0", c.chi0),
                      ("prefs.gamma", p.gamma), ("prefs.rho", p.rho), ("prefs.T", p.T)):
        if not math.isfinite(val):
            errors.append(Finding(name, f"{name} is not finite"))

    if not m.s1 > 0:
        errors.append(Finding("market.s1", "s1 must be positive"))
    if not m.r0 > 0:
        warnings.append(Finding("market.r0", "r0 <= 0: outside the positive-rate regime"))
    if m.r0 >= m.r1:
        warnings.append(Finding("market.r1", "r0 >= r1: shortselling regime"))

    if not 0.0 <= c.chi < 1.0:
        errors.append(Finding("costs.chi", "chi outside [0,1)"))
    if not -1.0 < c.chi0 < 1.0:
        errors.append(Finding("costs.chi0", "chi0 outside (-1,1)"))
    if c.buy_rate < 0 or c.sell_rate < 0:
        errors.append(Finding("costs", "one-way cost negative: need chi >= |chi0|"))

    if not 0.0 < p.gamma < 1.0:
        errors.append(Finding("prefs.gamma", "gamma outside (0,1)"))
    if not p.rho >= 0:
        errors.append(Finding("prefs.rho", "rho must be nonnegative"))
    if not p.T > 0:
        errors.append(Finding("prefs.T", "T must be positive"))

    if beq.kind not in BEQUEST_KINDS:
        errors.append(Finding("bequest.kind", f"unknown bequest kind {beq.kind!r}"))
    if beq.K < 0 or beq.A_prime < 0:
        errors.append(Finding("bequest", "K and A_prime must be nonnegative"))
    if beq.kind == "none" and (beq.K != 0 or beq.A_prime != 0):
        errors.append(Finding("bequest", "bequest kind none requires K = 0 and A_prime = 0"))

    if inc.kind not in INCOME_KINDS:
        errors.append(Finding("income.kind", f"unknown income kind {inc.kind!r}"))
    elif inc.kind == "tabulated":
        ts = [t for t, _ in inc.table]
        if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])):
            errors.append(Finding("income.table", "income table times must be strictly increasing"))
        elif ts[0] > 0 or ts[-1] < p.T:
            errors.append(Finding("income.table", "income table must cover [0, T]"))
    elif inc.kind == "gaussian-jolt" and not inc.sigma > 0:
        errors.append(Finding("income.sigma", "gaussian-jolt needs sigma > 0"))

    if not instance.z_initial > 0:
        errors.append(Finding("initial", "z0_initial + z1_initial must be positive"))

    frictionless = instance.problem in ("terminal", "consumption")
    if frictionless and not c.is_zero:
        errors.append(Finding("costs", f"problem {instance.problem!r} requires zero transaction costs"))
    if instance.problem == "terminal":
        if inc.kind != "zero" and not (inc.kind == "constant" and inc.level == 0):
            errors.append(Finding("income", "terminal-wealth problem requires zero income"))
        if beq.kind != "none":
            errors.append(Finding("bequest", "terminal-wealth problem has no bequest"))
    if instance.problem == "transaction_costs" and beq.kind != "none":
        errors.append(Finding("bequest", "use problem = bequest for a mandatory bequest"))
    if instance.problem == "bequest" and beq.kind != "mandatory":
        errors.append(Finding("bequest.kind", "bequest problem requires kind = mandatory"))

    return ValidationReport(tuple(errors), tuple(warnings))


def transaction_cost(v, costs: TransactionCosts):
    """Cost of trading value ``v`` of the risky asset (buy if positive)."""
    v = np.asarray(v, dtype=float)
    out = np.where(v > 0, v * costs.buy_rate, np.where(v < 0, -v * costs.sell_rate, 0.0))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

_SECTIONS = {
    "market": MarketParams,
    "costs": TransactionCosts,
    "prefs": PreferenceParams,
    "income": IncomeStream,
    "bequest": BequestSpec,
}
_REQUIRED = {
    "market": ("r0", "r1", "s1"),
    "prefs": ("gamma", "rho", "T"),
}


class ScenarioError(ValueError):
    """Malformed scenario text; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        loc = ""
        if path:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}:"
        super().__init__(f"{loc} {message}".strip() if loc else message)


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            if re.match(rf"{re.escape(key)}\s*[=:]", line, flags=re.IGNORECASE):
                return i
    return None


def _parse_table(raw: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for chunk in raw.replace(";", ",").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        t, y = chunk.split(":")
        pairs.append((float(t), float(y)))
    return tuple(pairs)


def _format_float(x: float) -> str:
    return repr(float(x))


def parse_scenario(text: str, path: str | None = None) -> tuple[ProblemInstance, dict[str, str]]:
    """Parse scenario text into an instance plus the raw ``[run]`` settings."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<scenario>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ScenarioError(exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc),
                            line, path) from None

    def get(section: str, key: str, conv=float, default=None):
        if not cp.has_section(section) or not cp.has_option(section, key):
            if default is not None:
                return default
            raise ScenarioError(f"missing key {key!r} in section [{section}]",
                                _locate(text, section), path)
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except ValueError:
            raise ScenarioError(f"bad value for {section}.{key}: {raw!r}",
                                _locate(text, section, key), path) from None

    known = set(_SECTIONS) | {"initial", "run", "problem"}
    for sec in cp.sections():
        if sec not in known:
            raise ScenarioError(f"unknown section [{sec}]", _locate(text, sec), path)
    for sec, cls in _SECTIONS.items():
        if cp.has_section(sec):
            allowed = {f.name for f in fields(cls)}
            for key in cp.options(sec):
                if key not in allowed:
                    raise ScenarioError(f"unknown key {key!r} in section [{sec}]",
                                        _locate(text, sec, key), path)
    for sec, keys in _REQUIRED.items():
        for key in keys:
            get(sec, key)

    problem = get("problem", "kind", str, default="")
    if not problem:
        raise ScenarioError("missing key 'kind' in section [problem]", _locate(text, "problem"), path)
    market = MarketParams(get("market", "r0"), get("market", "r1"), get("market", "s1"))
    prefs = PreferenceParams(get("prefs", "gamma"), get("prefs", "rho"), get("prefs", "T"))
    costs = TransactionCosts(get("costs", "chi", default=0.0), get("costs", "chi0", default=0.0))
    income = IncomeStream(
        kind=get("income", "kind", str, default="zero"),
        level=get("income", "level", default=0.0),
        table=get("income", "table", _parse_table, default=()),
        sigma=get("income", "sigma", default=0.0),
        K=get("income", "K", default=0.0),
    )
    bequest = BequestSpec(
        kind=get("bequest", "kind", str, default="none"),
        K=get("bequest", "K", default=0.0),
        A_prime=get("bequest", "A_prime", default=0.0),
    )
    instance = ProblemInstance(
        problem=problem.strip(),
        market=market,
        prefs=prefs,
        costs=costs,
        income=income,
        bequest=bequest,
        z0_initial=get("initial", "z0_initial", default=1.0),
        z1_initial=get("initial", "z1_initial", default=0.0),
    )
    run = dict(cp.items("run")) if cp.has_section("run") else {}
    return instance, run


def load_scenario(path: str | Path) -> tuple[ProblemInstance, dict[str, str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path=str(path)) from None
    return parse_scenario(text, str(path))


def instance_sections(instance: ProblemInstance) -> dict[str, dict[str, str]]:
    """Canonical string form of every section, used for dumps and hashing."""
    inc = instance.income
    out = {
        "problem": {"kind": instance.problem},
        "market": {k: _format_float(v) for k, v in vars(instance.market).items()},
        "costs": {k: _format_float(v) for k, v in vars(instance.costs).items()},
        "prefs": {k: _format_float(v) for k, v in vars(instance.prefs).items()},
        "income": {"kind": inc.kind, "level": _format_float(inc.level),
                   "sigma": _format_float(inc.sigma), "K": _format_float(inc.K)},
        "bequest": {"kind": instance.bequest.kind, "K": _format_float(instance.bequest.K),
                    "A_prime": _format_float(instance.bequest.A_prime)},
        "initial": {"z0_initial": _format_float(instance.z0_initial),
                    "z1_initial": _format_float(instance.z1_initial)},
    }
    if inc.table:
        out["income"]["table"] = ", ".join(f"{_format_float(t)}:{_format_float(y)}" for t, y in inc.table)
    return out


def dump_scenario(instance: ProblemInstance, run: dict[str, str] | None = None) -> str:
    lines: list[str] = []
    sections = instance_sections(instance)
    if run:
        sections["run"] = {k: str(v) for k, v in sorted(run.items())}
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)


def instance_hash(instance: ProblemInstance) -> str:
    import hashlib

    return hashlib.sha256(dump_scenario(instance).encode()).hexdigest()[:16]


def iter_dotted_params(instance: ProblemInstance) -> Iterable[str]:
    for sec in ("market", "costs", "prefs", "bequest"):
        for f in fields(getattr(instance, sec)):
            if f.name != "kind":
                yield f"{sec}.{f.name}"
    yield "income.level"
    yield "z0_initial"
    yield "z1_initial"
