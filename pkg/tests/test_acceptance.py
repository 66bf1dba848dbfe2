"""The twelve acceptance criteria, one test each.

Every test prints a single PASS/FAIL line.  Run as a script for the summary
alone:  python3 tests/test_acceptance.py [numbers...]
"""
import math
import random
import sys
import time
from fractions import Fraction as F

import numpy as np
import pytest
from scipy.integrate import quad

from nsinflate.bump import aa_kernel
from nsinflate.data import build_data, certify_norms
from nsinflate.inflation import appendixA_split, assemble_u1, compute_B1, compute_B2, inflation_sweep, mc_oracle
from nsinflate.lp import BesovIndex, bernstein_check, besov_norm, random_annulus_field
from nsinflate.nse import oracle_agreement, periodize, run_probe
from nsinflate.params import (check_lemma31, check_lemma41, make_params, preset, preset_lemma31, preset_lemma41,
                              random_feasible, remark_equivalences)
from nsinflate.profile import default_profile, partition_defect


def report(num, title, passed, detail, elapsed, budget):
    line = f"[{'PASS' if passed else 'FAIL'}] {num:>2}. {title}: {detail} ({elapsed:.1f}s, budget {budget})"
    print(line, flush=True)
    return passed


# -- criteria --------------------------------------------------------------------------

def crit01():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    r = 10.0 ** rng.uniform(-6, 6, 10 ** 5)
    worst = float(partition_defect(default_profile(), r).max())
    el = time.perf_counter() - t0
    return report(1, "partition of unity", worst <= 1e-8 and el < 1, f"max defect {worst:.2e}", el, "1s")


def crit02():
    t0 = time.perf_counter()
    rng = random.Random(2)
    worst = 0.0
    for i in range(20):
        s, p, r = rng.uniform(-1, 1), rng.choice([1.5, 2.0, 4.0, 6.0, math.inf]), rng.choice([1, 2, math.inf])
        f = random_annulus_field(rng.randint(-2, 2), M=16, cells=4.0, seed=100 + i)
        idx = BesovIndex(s, p, r)
        got = besov_norm(f.dilate(1), idx).value / besov_norm(f, idx).value
        want = 2.0 ** (s - (0 if math.isinf(p) else 3 / p))
        worst = max(worst, abs(got / want - 1))
    el = time.perf_counter() - t0
    return report(2, "Besov scaling identity", worst <= 1e-10 and el < 10, f"max rel error {worst:.2e}", el, "10s")


def crit03():
    t0 = time.perf_counter()
    spreads = []
    for gamma, p, q in (((0, 0, 0), 2.0, math.inf), ((1, 0, 0), 2.0, 4.0), ((1, 1, 0), 3.0, 6.0)):
        ratios = [bernstein_check(random_annulus_field(j, M=16, seed=30 + j), j, gamma, p, q) for j in range(-5, 6)]
        spreads.append(max(ratios) / min(ratios))
    el = time.perf_counter() - t0
    ok = max(spreads) <= 10 and el < 30
    return report(3, "Bernstein ratio uniformity", ok, "spreads " + ", ".join(f"{s:.3f}" for s in spreads), el, "30s")


def _tau_integral(t, x2, y2, mu):
    return quad(lambda s: math.exp(-mu * ((t - s) * x2 + s * y2)), 0, t, epsabs=0, epsrel=1e-13, limit=200)[0]


def crit04():
    rng = np.random.default_rng(4)
    n = 10 ** 4
    t = 10.0 ** rng.uniform(-6, 0, n)
    mu = rng.uniform(0.05, 3.0, n)
    # exponents mu t |xi|^2 from 1e-8 to 50; half the draws sit on the near-equal shell
    # mu t (|eta|^2 - |xi|^2) = +-1e-12..1e-2, which straddles the series switch
    x2 = 10.0 ** rng.uniform(-8, math.log10(50), n) / (mu * t)
    near = rng.random(n) < 0.5
    shell = x2 + rng.choice([-1, 1], n) * 10.0 ** rng.uniform(-12, -2, n) / (mu * t)
    y2 = np.abs(np.where(near, shell, 10.0 ** rng.uniform(-8, math.log10(50), n) / (mu * t)))
    refs = [_tau_integral(*a) for a in zip(t, x2, y2, mu)]
    t0 = time.perf_counter()
    vals = [aa_kernel(*a) for a in zip(t, x2, y2, mu)]
    el = time.perf_counter() - t0
    worst = max(abs(v - r) / r for v, r in zip(vals, refs))
    return report(4, "A kernel vs tau quadrature", worst <= 1e-10 and el < 5, f"max rel error {worst:.2e}", el, "5s")


def crit05():
    t0 = time.perf_counter()
    parts, ok = [], True
    for N in (6, 7, 8):
        ps = preset_lemma31(12, N=N, k0=6)
        d = build_data(ps, "THM1", check=False)
        asm = assemble_u1(d, ps.T0)
        for name, fn, seed in (("B1", compute_B1, 1), ("B2", compute_B2, 2)):
            q = fn(asm).to_float()
            mc = mc_oracle(d, ps.T0, n_samples=10 ** 6, seed=seed, functional=name)
            z = (q - mc.value) / mc.sigma
            ok &= mc.agrees(q)
            parts.append(f"N={N} {name} z={z:+.2f}")
    el = time.perf_counter() - t0
    return report(5, "quadrature vs Monte-Carlo", ok and el < 600, "; ".join(parts), el, "10min")


def _slope(num, title, p, regime, tol):
    t0 = time.perf_counter()
    tab = inflation_sweep(p, regime, range(100, 161, 10))
    el = time.perf_counter() - t0
    ok = tab.slope_rel_deviation <= tol and tab.ratio_monotone and el < 300
    detail = (f"slope {tab.slope:.5f} vs {tab.expected:.5f} (deviation {100 * tab.slope_rel_deviation:.1f}%), "
              f"|B2|/|B1| monotone {tab.ratio_monotone}")
    return report(num, title, ok, detail, el, "5min")


def crit06():
    return _slope(6, "inflation slope, THM1 p=12", 12, "THM1", 0.10)


def crit07():
    return _slope(7, "inflation slope, THM2 p=24", 24, "THM2", 0.15)


def crit08():
    t0 = time.perf_counter()
    ratios = []
    for N in (100, 130, 160):
        ps = preset("APPENDIX_A", None, N=N, k0=100)
        d = build_data(ps, "APPENDIX_A")
        ratios.append(appendixA_split(assemble_u1(d, ps.T0), parity=True).ratio_log2)
    el = time.perf_counter() - t0
    ok = ratios[0] > ratios[1] > ratios[2] and el < 300
    return report(8, "Appendix A subdominance", ok, "log2 ratios " + ", ".join(f"{r:.2f}" for r in ratios), el,
                  "5min")


def crit09():
    t0 = time.perf_counter()
    certs = [certify_norms(build_data(preset("THM1", 12, N=N, k0=4), "THM1")) for N in (50, 100, 200)]
    el = time.perf_counter() - t0
    ok, parts = el < 120, []
    for field in ("a0_besov", "u0_besov"):
        ratios = [getattr(c, field + "_ratio") for c in certs]
        absval = [getattr(c, field + "_log2") for c in certs]
        spread = max(ratios) / min(ratios)
        ok &= spread <= 2 and absval[0] > absval[1] > absval[2]
        parts.append(f"{field} spread {spread:.3f}, log2 norms " + " ".join(f"{v:.2f}" for v in absval))
    return report(9, "smallness certificates", ok, "; ".join(parts), el, "2min")


def crit10():
    t0 = time.perf_counter()
    ok = True
    for p in (8, 12, 18, 24, 100):
        for ps, check in ((preset_lemma31(p), check_lemma31), (preset_lemma41(p), check_lemma41)):
            rep = check(ps)
            ok &= rep.passed and all(c.slack > 0 for c in rep.conditions)
        ps = preset_lemma31(p)
        edge = make_params(p, ps.eps, (F(1, 2) - F(3, p)) / 2, q=ps.q, p0=ps.p0)
        ok &= not check_lemma31(edge).passed
    el = time.perf_counter() - t0
    return report(10, "parameter lemmas", ok and el < 1, "5 presets feasible, boundary fails", el, "1s")


def crit11():
    t0 = time.perf_counter()
    rng = random.Random(11)
    count, ok = 0, True
    for regime in ("THM1", "THM2"):
        for _ in range(50):
            eqs = remark_equivalences(random_feasible(regime, rng), regime)
            ok &= all(e.agree for e in eqs)
            count += len(eqs)
    el = time.perf_counter() - t0
    return report(11, "remark equivalences", ok and el < 1, f"{count} exact identities checked", el, "1s")


def crit12():
    t0 = time.perf_counter()
    ps = preset("THM1", 12, N=7, k0=5)
    rep = run_probe(ps, M=128, steps=256, identities_every=8)
    d = build_data(ps, "THM1")
    per = periodize(d, rep.spec)
    orc = oracle_agreement(per.u, rep.spec, rep.dt, 4)
    el = time.perf_counter() - t0
    ok = (rep.max_divergence <= 1e-8 and rep.max_identity_error <= 1e-8 and rep.y_ratio <= 0.2
          and rep.x_ratio <= 0.1 and orc <= 1e-8)
    detail = (f"div {rep.max_divergence:.1e}, identities {rep.max_identity_error:.1e}, Y/U1 {rep.y_ratio:.3f}, "
              f"X/a0 {rep.x_ratio:.3f}, oracle {orc:.1e}; one core, the 30 min budget is stated for 8")
    return report(12, "simulation probe", ok, detail, el, "30min on 8 cores")


CRITERIA = [crit01, crit02, crit03, crit04, crit05, crit06, crit07, crit08, crit09, crit10, crit11, crit12]


@pytest.mark.parametrize("crit", CRITERIA, ids=[f"criterion_{i + 1:02d}" for i in range(len(CRITERIA))])
def test_acceptance(crit, capsys):
    # the summary line bypasses capture so it shows in a plain pytest run
    with capsys.disabled():
        print()
        passed = crit()
    assert passed


if __name__ == "__main__":
    picks = [int(a) for a in sys.argv[1:]] or range(1, len(CRITERIA) + 1)
    results = [CRITERIA[i - 1]() for i in picks]
    sys.exit(0 if all(results) else 1)
