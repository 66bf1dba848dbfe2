"""Exact rational bookkeeping for the inflation parameters.

Every exponent is a ``Fraction``.  Linear forms over the basis
{1, 1/p, 1/p0, 1/q, eps, eps1} let the remark equivalences be checked as
identities between forms rather than by sampling.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction as F

SMALL_WARN = 0.1
SMALL_ACCEPT = 0.01


class InfeasibleParams(ValueError):
    def __init__(self, message, violated=()):
        super().__init__(message)
        self.violated = list(violated)


def rational(x) -> F:
    """Parse '2.1/24', '3/4', 0.72, 12 ... into an exact Fraction."""
    if isinstance(x, F):
        return x
    if isinstance(x, int):
        return F(x)
    if isinstance(x, float):
        if math.isinf(x):
            raise ValueError("infinite value has no rational form")
        return F(repr(x))
    text = str(x).strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return rational(num) / rational(den)
    return F(text)


def _inv(x) -> F:
    return F(0) if x is None or (isinstance(x, float) and math.isinf(x)) else 1 / rational(x)


@dataclass(frozen=True)
class ParamSet:
    p: object  # Fraction, or math.inf for the p = infinity regime
    eps: F
    eps1: F
    N: int = 200
    k0: int = 100
    mu: float = 1.0
    q: F | None = None
    p0: F | None = None

    @property
    def ip(self) -> F:
        return _inv(self.p)

    @property
    def p_is_inf(self) -> bool:
        return isinstance(self.p, float) and math.isinf(self.p)

    @property
    def gap(self) -> F:
        """1/2 - 3/p."""
        return F(1, 2) - 3 * self.ip

    @property
    def CN_log2(self) -> F:
        return F(self.N, 2) * (self.gap - 2 * self.eps1)

    @property
    def T0_log2(self) -> F:
        return -2 * (1 + self.eps) * self.N

    @property
    def inflation_rate(self) -> F:
        return 2 * (self.eps1 - self.eps)

    @property
    def T0(self) -> float:
        return 2.0 ** float(self.T0_log2)

    def with_N(self, N) -> "ParamSet":
        return replace(self, N=int(N))

    def as_dict(self) -> dict:
        out = {"p": "inf" if self.p_is_inf else str(self.p), "eps": str(self.eps), "eps1": str(self.eps1),
               "N": self.N, "k0": self.k0, "mu": self.mu}
        if self.q is not None:
            out["q"] = str(self.q)
        if self.p0 is not None:
            out["p0"] = str(self.p0)
        return out


def make_params(p, eps, eps1, N=200, k0=100, mu=1.0, q=None, p0=None, three_over_q=None,
                three_over_p0=None) -> ParamSet:
    pv = math.inf if str(p).strip().lower() in ("inf", "infinity") else rational(p)
    if three_over_q is not None:
        q = 3 / rational(three_over_q)
    if three_over_p0 is not None:
        p0 = 3 / rational(three_over_p0)
    return ParamSet(pv, rational(eps), rational(eps1), int(N), int(k0), float(mu),
                    None if q is None else rational(q), None if p0 is None else rational(p0))


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

@dataclass
class Condition:
    name: str
    lhs: F
    rhs: F
    relation: str = "<"

    @property
    def slack(self) -> F:
        return self.rhs - self.lhs if self.relation == "<" else self.lhs - self.rhs

    @property
    def passed(self) -> bool:
        return self.slack > 0

    def as_dict(self):
        return {"name": self.name, "lhs": str(self.lhs), "rhs": str(self.rhs), "relation": self.relation,
                "slack": str(self.slack), "slack_float": float(self.slack), "pass": self.passed}


@dataclass
class FeasibilityReport:
    lemma: str
    conditions: list
    binding: str | None = None
    redundant: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def failures(self):
        return [c.name for c in self.conditions if not c.passed]

    def as_dict(self):
        return {"lemma": self.lemma, "pass": self.passed, "failures": self.failures,
                "binding": self.binding, "redundant": self.redundant,
                "conditions": [c.as_dict() for c in self.conditions]}


def _common_conditions(ps: ParamSet):
    return [
        Condition("eps > 0", F(0), 2 * ps.eps),
        Condition("eps < eps1", 2 * ps.eps, 2 * ps.eps1),
        Condition("2 eps1 < 1/2 - 3/p", 2 * ps.eps1, ps.gap),
    ]


def _q_conditions(ps: ParamSet):
    if ps.q is None:
        raise InfeasibleParams("q is required", ["q"])
    return [Condition("q > 3", F(3), ps.q), Condition("q < 6", ps.q, F(6))]


def check_lemma31(ps: ParamSet) -> FeasibilityReport:
    if ps.p_is_inf or ps.p <= 6:
        raise ValueError("the first parameter system needs 6 < p < inf")
    if ps.p0 is None:
        raise InfeasibleParams("p0 is required", ["p0"])
    ip, iq, ip0 = ps.ip, 1 / ps.q if ps.q else None, 1 / ps.p0
    e, e1 = ps.eps, ps.eps1
    conds = [
        Condition("3/q + 3/p0 > 1", F(1), 3 * iq + 3 * ip0),
        Condition("3/q + 3/p0 < 5/4 + 3/(2p) - 3/p0 + 2eps - 3eps1",
                  3 * iq + 3 * ip0, F(5, 4) + F(3, 2) * ip - 3 * ip0 + 2 * e - 3 * e1),
        Condition("3/p0 < 1/4 + 3/(2p) - eps1", 3 * ip0, F(1, 4) + F(3, 2) * ip - e1),
        Condition("p0 > 6", F(6), ps.p0),
        Condition("p0 < p", ps.p0, ps.p),
        Condition("3/q < 1 + 3eps - 2eps1", 3 * iq, 1 + 3 * e - 2 * e1),
    ] + _q_conditions(ps) + _common_conditions(ps)
    return FeasibilityReport("lemma31", conds)


LEMMA41_BRANCHES = (
    "1 + 2eps - 2eps1",
    "3/4 + 9/(2p) + 2eps - eps1",
    "3/4 - 3/(2p) + 2eps - 3eps1",
    "1/2 + 3/p + 2eps - 2eps1",
)


def lemma41_branch_values(ps: ParamSet):
    ip, e, e1 = ps.ip, ps.eps, ps.eps1
    return [1 + 2 * e - 2 * e1, F(3, 4) + F(9, 2) * ip + 2 * e - e1,
            F(3, 4) - F(3, 2) * ip + 2 * e - 3 * e1, F(1, 2) + 3 * ip + 2 * e - 2 * e1]


def check_lemma41(ps: ParamSet) -> FeasibilityReport:
    if ps.p_is_inf or ps.p <= 6:
        raise ValueError("the second parameter system needs 6 < p < inf")
    if ps.q is None:
        raise InfeasibleParams("q is required", ["q"])
    vals = lemma41_branch_values(ps)
    m = min(vals)
    bind = LEMMA41_BRANCHES[vals.index(m)]
    conds = [Condition("3/q < min(...)", 3 / ps.q, m)] + _q_conditions(ps) + _common_conditions(ps)
    redundant = {LEMMA41_BRANCHES[i]: vals[i] > m for i in (0, 1)}
    return FeasibilityReport("lemma41", conds, bind, redundant)


def check_appendix(ps: ParamSet) -> FeasibilityReport:
    """p = infinity: only 0 < 2eps < 2eps1 < 1/2 is required of the data scales."""
    return FeasibilityReport("appendix", _common_conditions(ps))


def check_regime(ps: ParamSet, regime: str) -> FeasibilityReport:
    regime = regime.upper()
    if regime == "THM1":
        return check_lemma31(ps)
    if regime == "THM2":
        return check_lemma41(ps)
    if regime == "APPENDIX_A":
        return check_appendix(ps)
    raise ValueError(f"unknown regime {regime}")


def require_feasible(ps: ParamSet, regime: str) -> FeasibilityReport:
    rep = check_regime(ps, regime)
    if not rep.passed:
        raise InfeasibleParams(f"infeasible parameters for {regime}: " + "; ".join(rep.failures), rep.failures)
    return rep


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def preset_lemma31(p, N=200, k0=100, mu=1.0) -> ParamSet:
    p = rational(p)
    gap = F(1, 2) - 3 / p
    lo, hi = F(15, 16) - F(21, 8) / p, F(19, 20) - F(27, 10) / p
    return make_params(p, gap / 5, gap / 4, N, k0, mu, three_over_q=(lo + hi) / 2,
                       three_over_p0=F(1, 16) + F(21, 8) / p)


def preset_lemma41(p, N=200, k0=100, mu=1.0) -> ParamSet:
    p = rational(p)
    if p <= 18:
        gap = F(1, 2) - 3 / p
        top = F(23, 40) - F(9, 20) / p
        return make_params(p, gap / 5, gap / 4, N, k0, mu, three_over_q=(F(1, 2) + top) / 2)
    top = F(1, 2) + F(7, 10) / p
    return make_params(p, 2 / p, F(21, 10) / p, N, k0, mu, three_over_q=(F(1, 2) + top) / 2)


def preset_appendix(N=200, k0=100, mu=1.0) -> ParamSet:
    """p = infinity limit of the first preset: eps1 = 1/8, eps = 1/10."""
    return ParamSet(math.inf, F(1, 10), F(1, 8), int(N), int(k0), float(mu))


def preset(regime: str, p=None, N=200, k0=100, mu=1.0) -> ParamSet:
    regime = regime.upper()
    if regime == "THM1":
        return preset_lemma31(p, N, k0, mu)
    if regime == "THM2":
        return preset_lemma41(p, N, k0, mu)
    if regime == "APPENDIX_A":
        return preset_appendix(N, k0, mu)
    raise ValueError(f"unknown regime {regime}")


def random_feasible(regime: str, rng: random.Random, max_tries: int = 10000) -> ParamSet:
    """Rejection sampler over rationals with small denominators."""
    regime = regime.upper()
    for _ in range(max_tries):
        p = F(rng.randint(61, 2000), 10)
        gap = F(1, 2) - 3 / p
        e1 = gap / 2 * F(rng.randint(1, 99), 100)
        e = e1 * F(rng.randint(1, 99), 100)
        if regime == "THM1":
            ip0_hi = min(F(1, 4) + F(3, 2) / p - e1, F(1, 2))
            ip0_lo = 3 / p
            if ip0_hi <= ip0_lo:
                continue
            t0 = ip0_lo + (ip0_hi - ip0_lo) * F(rng.randint(1, 99), 100)
            iq_hi = min(1 + 3 * e - 2 * e1, F(5, 4) + F(3, 2) / p - 2 * t0 + 2 * e - 3 * e1 - t0, F(1))
            iq_lo = max(F(1, 2), 1 - t0)
            if iq_hi <= iq_lo:
                continue
            tq = iq_lo + (iq_hi - iq_lo) * F(rng.randint(1, 99), 100)
            ps = make_params(p, e, e1, three_over_q=tq, three_over_p0=t0)
        else:
            top = min(min(lemma41_branch_values(ParamSet(p, e, e1))), F(1))
            if top <= F(1, 2):
                continue
            tq = F(1, 2) + (top - F(1, 2)) * F(rng.randint(1, 99), 100)
            ps = make_params(p, e, e1, three_over_q=tq)
        if check_regime(ps, regime).passed:
            return ps
    raise RuntimeError("no feasible parameter set found")


# ---------------------------------------------------------------------------
# Derived scales
# ---------------------------------------------------------------------------

@dataclass
class DerivedScales:
    CN_log2: F
    T0_log2: F
    inflation_rate: F
    N_over_CN: float
    small: bool
    acceptance_grade: bool

    def as_dict(self):
        return {"CN_log2": str(self.CN_log2), "T0_log2": str(self.T0_log2),
                "inflation_rate": str(self.inflation_rate), "N_over_CN": self.N_over_CN,
                "small": self.small, "acceptance_grade": self.acceptance_grade}


def derived_scales(ps: ParamSet, warn: bool = True) -> DerivedScales:
    ratio = ps.N * 2.0 ** (-float(ps.CN_log2))
    if warn and ratio > SMALL_WARN:
        warnings.warn(f"N/C(N) = {ratio:.3g} exceeds {SMALL_WARN}: data are not small", stacklevel=2)
    return DerivedScales(ps.CN_log2, ps.T0_log2, ps.inflation_rate, ratio,
                         ratio <= SMALL_WARN, ratio <= SMALL_ACCEPT)


# ---------------------------------------------------------------------------
# Remark equivalences as identities between linear forms
# ---------------------------------------------------------------------------

BASIS = ("1", "ip", "ip0", "iq", "eps", "eps1")


class Form(dict):
    """Linear form over BASIS with Fraction coefficients."""

    def __init__(self, **kw):
        super().__init__({k: F(v) for k, v in kw.items() if F(v) != 0})

    def __add__(self, other):
        out = Form(**self)
        for k, v in other.items():
            out[k] = out.get(k, F(0)) + v
            if out[k] == 0:
                del out[k]
        return out

    def __sub__(self, other):
        return self + other * F(-1)

    def __mul__(self, c):
        return Form(**{k: v * F(c) for k, v in self.items()})

    __rmul__ = __mul__

    def value(self, ps: ParamSet) -> F:
        env = {"1": F(1), "ip": ps.ip, "ip0": 1 / ps.p0 if ps.p0 else F(0),
               "iq": 1 / ps.q if ps.q else F(0), "eps": ps.eps, "eps1": ps.eps1}
        return sum((v * env[k] for k, v in self.items()), F(0))

    def __str__(self):
        parts = [f"{v}*{k}" if k != "1" else str(v) for k, v in sorted(self.items())]
        return " + ".join(parts) or "0"


ONE_F = Form(**{"1": 1})
T0_RATE = Form(**{"1": -2, "eps": -2})  # log2 T0 / N
CN_RATE = Form(**{"1": F(1, 4), "ip": F(-3, 2), "eps1": -1})  # log2 C(N) / N


@dataclass
class RemarkLine:
    name: str
    amplitude: Form  # N-coefficient of the explicit power of 2
    t_power: F
    cn_power: F
    lhs: Form  # stated inequality lhs < rhs
    rhs: Form


def remark_lines(regime: str):
    r = regime.upper()
    f = Form
    if r == "THM1":
        return [
            RemarkLine("cond11.1", f(ip0=3, ip=-3), F(0), F(1), f(ip0=3), f(**{"1": F(1, 4), "ip": F(3, 2), "eps1": -1})),
            RemarkLine("cond11.2", f(iq=3, ip=-3, **{"1": F(5, 2)}), F(3, 2), F(2), f(iq=3),
                       f(**{"1": 1, "eps": 3, "eps1": -2})),
            RemarkLine("cond11.3", f(iq=3, ip0=6, ip=-6, **{"1": F(3, 2)}), F(1), F(3), f(iq=3, ip0=3),
                       f(**{"1": F(5, 4), "ip": F(3, 2), "ip0": -3, "eps": 2, "eps1": -3})),
        ]
    if r == "THM2":
        return [
            RemarkLine("cond20.1", f(iq=3, ip=-3, **{"1": F(3, 2)}), F(1), F(2), f(iq=3),
                       f(**{"1": 1, "eps": 2, "eps1": -2})),
            RemarkLine("cond20.2", f(iq=3, ip=-6, **{"1": F(3, 2)}), F(1), F(1), f(iq=3),
                       f(**{"1": F(3, 4), "ip": F(9, 2), "eps": 2, "eps1": -1})),
            RemarkLine("cond20.3", f(iq=3, ip=-3, **{"1": 2}), F(1), F(3), f(iq=3),
                       f(**{"1": F(3, 4), "ip": F(-3, 2), "eps": 2, "eps1": -3})),
            RemarkLine("cond20.4", f(iq=3, ip=-6, **{"1": 2}), F(1), F(2), f(iq=3),
                       f(**{"1": F(1, 2), "ip": 3, "eps": 2, "eps1": -2})),
        ]
    raise ValueError(f"no remark lines for {regime}")


@dataclass
class Equivalence:
    name: str
    rate: Form
    difference: Form
    factor: F | None
    rate_value: F
    difference_value: F
    agree: bool

    def as_dict(self):
        return {"name": self.name, "rate": str(self.rate), "lhs_minus_rhs": str(self.difference),
                "factor": None if self.factor is None else str(self.factor),
                "rate_value": str(self.rate_value), "difference_value": str(self.difference_value),
                "agree": self.agree}


def _proportional(a: Form, b: Form):
    """c with a = c b, or None."""
    keys = set(a) | set(b)
    c = None
    for k in keys:
        x, y = a.get(k, F(0)), b.get(k, F(0))
        if y == 0:
            if x != 0:
                return None
            continue
        r = x / y
        if c is None:
            c = r
        elif r != c:
            return None
    return c


def remark_equivalences(ps: ParamSet, regime: str, lines=None):
    """For each remark line: log2-rate (per N) of the left quantity at T = T0
    and whether 'rate < 0' is the same statement as 'lhs < rhs' (rate is a
    positive multiple of lhs - rhs as linear forms)."""
    out = []
    for ln in lines or remark_lines(regime):
        rate = ln.amplitude + T0_RATE * ln.t_power - CN_RATE * ln.cn_power
        diff = ln.lhs - ln.rhs
        c = _proportional(rate, diff)
        rv, dv = rate.value(ps), diff.value(ps)
        agree = c is not None and c > 0 and ((rv < 0) == (dv < 0))
        out.append(Equivalence(ln.name, rate, diff, c, rv, dv, agree))
    return out


def flipped(line: RemarkLine) -> RemarkLine:
    return replace(line, lhs=line.rhs, rhs=line.lhs, name=line.name + " (flipped)")
