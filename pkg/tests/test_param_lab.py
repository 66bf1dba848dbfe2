import random
import warnings
from fractions import Fraction as F

import pytest
from hypothesis import given, settings, strategies as st

from nsinflate.params import (check_lemma31, check_lemma41, derived_scales, flipped, make_params, preset,
                              preset_lemma31, preset_lemma41, random_feasible, rational, remark_equivalences,
                              remark_lines)


def test_rational_parsing():
    assert rational("2.1/24") == F(21, 240)
    assert rational(0.72) == F(18, 25)
    assert rational("3/4") == F(3, 4)


def test_lemma31_preset_p12():
    ps = preset_lemma31(12)
    assert ps.eps1 == F(1, 16) and ps.eps == F(1, 20)
    assert 3 / ps.p0 == F(9, 32)
    assert 6 < float(ps.p0) < 12
    assert F(71875, 100000) < 3 / ps.q < F(725, 1000)
    rep = check_lemma31(ps)
    assert rep.passed and all(c.slack > 0 for c in rep.conditions)


def test_lemma31_boundary_and_q_failures():
    ps = preset_lemma31(12)
    bad = make_params(12, ps.eps, (F(1, 2) - F(3, 12)) / 2, q=ps.q, p0=ps.p0)
    assert "2 eps1 < 1/2 - 3/p" in check_lemma31(bad).failures
    bad_q = make_params(12, ps.eps, ps.eps1, q=6, p0=ps.p0)
    assert "q < 6" in check_lemma31(bad_q).failures


def test_lemma41_p12_example():
    ps = make_params(12, "1/20", "1/16", three_over_q="0.51")
    rep = check_lemma41(ps)
    assert rep.passed
    assert rep.binding == "3/4 - 3/(2p) + 2eps - 3eps1"
    assert all(rep.redundant.values())


def test_lemma41_p24_preset():
    ps = make_params(24, "2/24", "2.1/24", three_over_q="0.52")
    assert check_lemma41(ps).passed
    assert ps.inflation_rate == F(2, 10) / 24
    assert preset_lemma41(24).inflation_rate == F(2, 10) / 24


def test_lemma41_equal_eps_fails():
    ps = make_params(12, "1/16", "1/16", three_over_q="0.51")
    assert "eps < eps1" in check_lemma41(ps).failures


@pytest.mark.parametrize("p", [8, 12, 18, 24, 100])
def test_presets_feasible(p):
    assert check_lemma31(preset_lemma31(p)).passed
    assert check_lemma41(preset_lemma41(p)).passed


@settings(max_examples=60, deadline=None)
@given(st.fractions(F(61, 10), F(1000)))
def test_presets_feasible_over_p_grid(p):
    for ps, check in ((preset_lemma31(p), check_lemma31), (preset_lemma41(p), check_lemma41)):
        rep = check(ps)
        assert rep.passed
        assert ps.inflation_rate > 0 and ps.CN_log2 > 0


def test_slacks_are_exact_and_order_free():
    ps = preset_lemma31(12)
    a = {c.name: c.slack for c in check_lemma31(ps).conditions}
    b = {c.name: c.slack for c in reversed(check_lemma31(ps).conditions)}
    assert a == b
    assert all(isinstance(v, F) for v in a.values())


def test_remark_line_cond11_first():
    ps = preset_lemma31(12)
    eq = remark_equivalences(ps, "THM1")[0]
    assert eq.name == "cond11.1" and eq.agree and eq.factor > 0
    assert eq.rate_value < 0 and eq.difference_value < 0


def test_remark_line_cond20_third():
    ps = preset_lemma41(12)
    eq = remark_equivalences(ps, "THM2")[2]
    assert eq.name == "cond20.3" and eq.agree and eq.rate_value < 0


def test_flipped_line_disagrees():
    ps = preset_lemma31(12)
    lines = [flipped(ln) for ln in remark_lines("THM1")]
    assert not any(e.agree for e in remark_equivalences(ps, "THM1", lines))


@pytest.mark.parametrize("regime", ["THM1", "THM2"])
def test_remark_equivalences_random(regime):
    rng = random.Random(7)
    for _ in range(20):
        ps = random_feasible(regime, rng)
        assert all(e.agree for e in remark_equivalences(ps, regime))
        assert ps.inflation_rate > 0 and ps.CN_log2 > 0


def test_derived_scales_p12():
    ds = derived_scales(preset("THM1", 12, N=200), warn=False)
    assert ds.CN_log2 == F(25, 2)
    assert ds.inflation_rate == F(1, 40)
    assert ds.N_over_CN == pytest.approx(200 * 2 ** -12.5, rel=1e-12)
    assert ds.N_over_CN == pytest.approx(0.035, abs=5e-4)
    assert ds.small and not ds.acceptance_grade


def test_derived_scales_warn_at_small_N():
    with pytest.warns(UserWarning):
        ds = derived_scales(preset("THM1", 12, N=100))
    assert ds.N_over_CN == pytest.approx(1.31, abs=0.01)


def test_zero_eps_time_scale():
    ps = make_params(12, 0, "1/16", N=50)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert derived_scales(ps).T0_log2 == -100
