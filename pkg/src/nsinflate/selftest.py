"""Quick consistency checks across the modules (a few seconds in total)."""

from __future__ import annotations

import math
import random

import numpy as np
from scipy.integrate import quad


def _check(name, passed, detail):
    return {"name": name, "passed": bool(passed), "detail": detail}


def partition_of_unity():
    from .profile import default_profile, partition_defect
    prof = default_profile()
    r = 10.0 ** np.random.default_rng(0).uniform(-6, 6, 10 ** 4)
    d = float(np.abs(partition_defect(prof, r)).max())
    return _check("partition of unity", d <= 1e-8, f"max defect {d:.2e}")


def kernel_closed_form():
    from .bump import aa_kernel
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        t, mu = rng.uniform(0.01, 1), rng.uniform(0.1, 2)
        x2 = rng.uniform(0, 20)
        y2 = x2 * (1 + rng.choice([1e-9, 1e-3, 0.5]))
        ref = quad(lambda s: math.exp(-mu * ((t - s) * x2 + s * y2)), 0, t, epsabs=0, epsrel=1e-13)[0]
        worst = max(worst, abs(aa_kernel(t, x2, y2, mu) - ref) / ref)
    return _check("time kernel", worst <= 1e-10, f"max relative error {worst:.2e}")


def parameter_presets():
    from .params import check_lemma31, check_lemma41, preset_lemma31, preset_lemma41
    slacks = []
    for p in (8, 12, 18, 24, 100):
        slacks.append(min(c.slack for c in check_lemma31(preset_lemma31(p)).conditions))
        slacks.append(min(c.slack for c in check_lemma41(preset_lemma41(p)).conditions))
    return _check("parameter presets", all(s > 0 for s in slacks), f"min slack {min(slacks)}")


def remark_lines():
    from .params import random_feasible, remark_equivalences
    rng = random.Random(0)
    ok = True
    for regime in ("THM1", "THM2"):
        for _ in range(5):
            ok &= all(e.agree for e in remark_equivalences(random_feasible(regime, rng), regime))
    return _check("remark equivalences", ok, "10 random parameter sets")


def besov_scaling():
    from .lp import BesovIndex, besov_norm, random_annulus_field
    f = random_annulus_field(0, M=16, cells=4.0, seed=3)
    idx = BesovIndex(0.5, 4.0, 1)
    r = besov_norm(f.dilate(1), idx).value / besov_norm(f, idx).value
    want = 2.0 ** (idx.s - 3 / idx.p)
    err = abs(r / want - 1)
    return _check("Besov scaling", err <= 1e-10, f"relative error {err:.2e}")


def solver_oracle():
    from .nse import Grid, TorusSpec, oracle_agreement
    spec = TorusSpec(1.0, 16)
    g = Grid(spec)
    rng = np.random.default_rng(2)
    F = (rng.standard_normal((3,) + g.k2.shape) + 1j * rng.standard_normal((3,) + g.k2.shape))
    F = g.leray(g.realify(F * (g.kmod <= 3)))
    F /= np.abs(g.phys(F)).max()
    d = oracle_agreement(F, spec, 1e-3, 3)
    return _check("classical solver oracle", d <= 1e-8, f"max step defect {d:.2e}")


def run_selftest():
    return [partition_of_unity(), kernel_closed_form(), parameter_presets(), remark_lines(),
            besov_scaling(), solver_oracle()]
