import math

import pytest

from nsinflate.data import build_data
from nsinflate.inflation import (appendixA_split, assemble_u1, compute_B1, compute_B2, inflation_sweep,
                                 lower_bound_chain, mc_oracle, pairing_total)
from nsinflate.params import preset


def _data(N=6, k0=6, regime="THM1", p=12, **kw):
    return build_data(preset(regime, p, N=N, k0=k0), regime, check=False, **kw)


@pytest.fixture(scope="module")
def small():
    return _data(7, 6)


def test_zero_time_gives_zero(small):
    asm = assemble_u1(small, 0.0)
    assert compute_B1(asm).to_float() == 0.0
    assert compute_B2(asm).to_float() == 0.0


def test_single_frequency_box_layout():
    d = _data(6, 6)
    asm = assemble_u1(d, 2.0 ** -16, out_radius=None)
    shifts = sorted(round(b.c_f[0] + b.c_g[0]) for b in asm.boxes_11)
    assert shifts == [-128, 0, 0, 128]
    # the probe only sees the two output boxes at the origin, and they contribute equally
    far = [b for b in asm.boxes_11 if abs(b.c_f[0] + b.c_g[0]) > 1]
    near = [b for b in asm.boxes_11 if abs(b.c_f[0] + b.c_g[0]) <= 1]
    vals = [v for _, v, _ in pairing_total(assemble_u1(d, 2.0 ** -16)).per_box]
    assert len(far) == 2 and len(near) == 2 and len(vals) == 2
    assert vals[0].log2mag == pytest.approx(vals[1].log2mag, abs=1e-9)
    assert vals[0].phase == pytest.approx(vals[1].phase, abs=1e-9)


def test_zero_amplitude_gives_zero():
    d = _data(7, 6, a_scale=0.0)
    asm = assemble_u1(d, 2.0 ** -16)
    assert compute_B1(asm).to_float() == 0.0 and compute_B2(asm).to_float() == 0.0


def test_small_time_linearity():
    d = _data(6, 6)
    b = [compute_B1(assemble_u1(d, 2.0 ** -e)).to_float() for e in (16, 17)]
    assert b[0] < 0 and b[1] < 0
    assert b[0] / b[1] == pytest.approx(2.0, rel=0.1)


def test_bilinear_in_amplitudes(small):
    t = 2.0 ** -18
    base = compute_B1(assemble_u1(small, t)).log2_abs
    da = compute_B1(assemble_u1(_data(7, 6, a_scale=2.0), t)).log2_abs
    du = compute_B1(assemble_u1(_data(7, 6, u_scale=2.0), t)).log2_abs
    assert da - base == pytest.approx(1.0, abs=1e-6)
    assert du - base == pytest.approx(1.0, abs=1e-6)


def test_ratio_decreases_with_N_at_fixed_time():
    t = 2.0 ** -20
    ratios = []
    for N in (6, 7, 8):
        asm = assemble_u1(_data(N, 6), t)
        ratios.append(compute_B2(asm).log2_abs - compute_B1(asm).log2_abs)
    assert ratios[0] - ratios[1] >= 1 and ratios[1] - ratios[2] >= 1


def test_pairing_is_sum_of_functionals(small):
    asm = assemble_u1(small, 2.0 ** -18)
    b1, b2 = compute_B1(asm, rtol=1e-8), compute_B2(asm, rtol=1e-8)
    total = pairing_total(asm, rtol=1e-8)
    want = b1.to_float() + b2.to_float()
    assert total.to_float() == pytest.approx(want, rel=1e-7)


def test_lower_bound_chain_ratios_stable():
    reps = []
    for N in (100, 120):
        ps = preset("THM1", 12, N=N, k0=84)
        d = build_data(ps, "THM1")
        reps.append(lower_bound_chain(assemble_u1(d, ps.T0), d))
    for name in ("ratio_binf_pairing", "ratio_besov_binf"):
        vals = [getattr(r, name) for r in reps]
        assert max(vals) / min(vals) <= 3
    for r in reps:
        assert r.pairing.to_float() == pytest.approx(r.B1.to_float() + r.B2.to_float(), rel=1e-8)


def test_sweep_fixed_time_ratio_monotone():
    tab = inflation_sweep(12, "THM1", [6, 7, 8], k0=6, t_fixed=2.0 ** -20, workers=1)
    assert tab.ratio_monotone
    assert [r.N for r in tab.rows] == [6, 7, 8]


def test_appendix_split_vanishes_without_density():
    d = build_data(preset("APPENDIX_A", None, N=8, k0=6), "APPENDIX_A", check=False, a_scale=0.0)
    s = appendixA_split(assemble_u1(d, 2.0 ** -18), parity=True)
    assert s.xi_contribution.is_zero
    assert not s.upsilon_contribution.is_zero


def test_mc_zero_data():
    d = _data(6, 6, a_scale=0.0)
    est = mc_oracle(d, 2.0 ** -16, n_samples=10 ** 4, seed=0)
    assert est.value == 0.0 and est.sigma == 0.0


def test_mc_sigma_scaling():
    d = _data(6, 6)
    s1 = mc_oracle(d, 2.0 ** -16, n_samples=20000, seed=3).sigma
    s2 = mc_oracle(d, 2.0 ** -16, n_samples=40000, seed=3).sigma
    assert s1 / s2 == pytest.approx(math.sqrt(2), rel=0.15)


def test_mc_agrees_with_quadrature():
    d = _data(6, 6)
    t = 2.0 ** -16
    est = mc_oracle(d, t, n_samples=40000, seed=11)
    assert est.agrees(compute_B1(assemble_u1(d, t)).to_float())
