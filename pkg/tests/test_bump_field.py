import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from nsinflate.bump import (SERIES_SWITCH, BumpSum, apply_multiplier, aa_kernel, duhamel_bilinear,
                            envelope_lp_norm, make_term, pairing)
from nsinflate.data import U_SYMBOLS, phi_physical
from nsinflate.logdomain import LogValue
from nsinflate.profile import default_profile
from nsinflate.symbols import NORM, ONE, X, heat, parse, riesz


def _tau_integral(t, x2, y2, mu):
    return quad(lambda s: math.exp(-mu * ((t - s) * x2 + s * y2)), 0, t, epsabs=0, epsrel=1e-13)[0]


# -- symbols ------------------------------------------------------------------

def test_riesz_squares_sum_to_minus_one():
    m = riesz(1) * riesz(1) + riesz(2) * riesz(2) + riesz(3) * riesz(3)
    xi = np.random.default_rng(0).normal(size=(1000, 3))
    assert np.abs(m(xi) + 1).max() <= 1e-14


def test_divergence_of_u0_symbol_vanishes():
    xi = np.random.default_rng(1).normal(size=(1000, 3))
    div = sum(1j * X(i + 1)(xi) * U_SYMBOLS[i](xi) for i in range(3))
    assert np.abs(div).max() <= 1e-15


def test_heat_at_zero_time_is_identity():
    f = BumpSum((make_term((5, 0, 0), 0.7, (ONE,)),), 1)
    g = apply_multiplier(f, heat(1.3))
    xi = np.array([[5.5, 0.2, 0.1], [4.2, -0.3, 0.0]])
    assert np.allclose(g.spectrum(xi, t=0.0), f.spectrum(xi), rtol=0, atol=1e-15)
    assert np.all(np.abs(g.spectrum(xi, t=0.1)) < np.abs(f.spectrum(xi)))


def test_symbol_degree_and_roundtrip():
    s = X(1) * X(2) / NORM ** 2
    assert s.degree() == 0
    assert parse(str(s))(np.array([[1.0, 2.0, 3.0]])) == pytest.approx(s(np.array([[1.0, 2.0, 3.0]])))


def test_singular_symbol_near_origin_is_quadrature_only():
    t = make_term((0.5, 0, 0), 1.0, (riesz(1),))
    assert t.quadrature_only
    assert not make_term((8, 0, 0), 1.0, (riesz(1),)).quadrature_only


def test_bumpsum_serialization_roundtrip():
    f = BumpSum((make_term((8, 0, 0), -3.5, U_SYMBOLS), make_term((-8, 0, 0), 3.5, U_SYMBOLS)), 3)
    g = BumpSum.loads(f.dumps())
    xi = np.random.default_rng(2).normal(size=(50, 3)) + [8, 0, 0]
    assert np.allclose(g.spectrum(xi), f.spectrum(xi), rtol=1e-14, atol=0)


def test_conjugate_symmetry_check():
    real = BumpSum((make_term((8, 0, 0), 1.0, (ONE,)), make_term((-8, 0, 0), 1.0, (ONE,))), 1)
    assert real.is_conjugate_symmetric()
    assert not BumpSum((make_term((8, 0, 0), 1.0, (ONE,)),), 1).is_conjugate_symmetric()


# -- time kernel ----------------------------------------------------------------

def test_kernel_values():
    assert aa_kernel(0.0, 1.0, 4.0, 1.0) == 0.0
    assert aa_kernel(0.5, 1.0, 1.0, 1.0) == pytest.approx(0.3032653299, abs=1e-10)
    # frozen from numeric tau quadrature
    assert aa_kernel(0.1, 1.0, 4.0, 1.0) == pytest.approx(0.0781724573, abs=1e-10)
    assert _tau_integral(0.1, 1.0, 4.0, 1.0) == pytest.approx(0.0781724573, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 50.0), st.floats(0.0, 50.0), st.floats(0.05, 3.0))
def test_kernel_matches_quadrature(t, x2, y2, mu):
    ref = _tau_integral(t, x2, y2, mu)
    assert abs(aa_kernel(t, x2, y2, mu) - ref) <= 1e-10 * ref


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1.01, 3.0), st.floats(0.0, 30.0), st.floats(0.0, 30.0))
def test_kernel_positive_and_increasing_in_t(t, factor, x2, y2):
    # increasing while mu t max(|xi|^2, |eta|^2) <= 1; beyond that the heat decay wins
    t = min(t, 1 / (factor * max(x2, y2, 1.0)))
    a, b = aa_kernel(t, x2, y2, 1.0), aa_kernel(t * factor, x2, y2, 1.0)
    assert 0 < a < b


@pytest.mark.parametrize("side", [0.5, 0.999, 1.001, 2.0])
def test_kernel_branch_consistency(side):
    mu, t, x2 = 1.0, 0.3, 7.0
    d = side * SERIES_SWITCH / (mu * t)
    ref = _tau_integral(t, x2, x2 + d, mu)
    assert abs(aa_kernel(t, x2, x2 + d, mu) - ref) <= 1e-10 * ref


def test_kernel_taylor_in_t():
    t = 1e-6
    assert aa_kernel(t, 4.0, 9.0, 1.0) / t == pytest.approx(1.0, abs=1e-4)


# -- Duhamel boxes ---------------------------------------------------------------

def _pair(k=6, amp_a=1.0, amp_u=1.0):
    c = 2.0 ** k
    a = BumpSum((make_term((c, 0, 0), amp_a, (ONE,)),), 1)
    u = BumpSum((make_term((-c, 0, 0), amp_u, U_SYMBOLS),), 3)
    return a, u


def test_duhamel_zero_coefficient_gives_no_boxes():
    _, u = _pair()
    assert duhamel_bilinear(BumpSum((), 1), u, [ONE, ONE, ONE], 0.1, 1.0) == []
    zero = BumpSum((make_term((64, 0, 0), 0.0, (ONE,)),), 1)
    assert duhamel_bilinear(zero, u, [ONE, ONE, ONE], 0.1, 1.0) == []


def test_duhamel_single_pair_box_at_origin():
    a, u = _pair(6)
    boxes = duhamel_bilinear(a, u, [ONE, ONE, ONE], 1e-3, 1.0, out_radius=1.0)
    assert len(boxes) == 1
    assert np.allclose(boxes[0].shift, 0.0)


def test_duhamel_output_region_filter():
    c = 64.0
    a = BumpSum((make_term((c, 0, 0), 1.0, (ONE,)),), 1)
    u = BumpSum((make_term((c, 0, 0), 1.0, U_SYMBOLS),), 3)
    assert duhamel_bilinear(a, u, [ONE, ONE, ONE], 1e-3, 1.0, out_radius=1.0) == []
    assert len(duhamel_bilinear(a, u, [ONE, ONE, ONE], 1e-3, 1.0)) == 1


def test_box_integrand_linear_in_small_t():
    a, u = _pair(6)
    xi = np.array([0.003, 0.004, 0.0])
    eta = np.array([-64.3, 0.5, 0.2])
    vals = []
    for t in (1e-12, 2e-12):
        box = duhamel_bilinear(a, u, [ONE, ONE, ONE], t, 1.0)[0]
        vals.append(box.evaluate(xi, eta) / t)
    assert abs(vals[1] / vals[0] - 1) <= 1e-6
    prof = default_profile()
    eta2 = float(eta @ eta)
    sym = sum(s(eta[None])[0] for s in U_SYMBOLS) * -eta2
    bumps = prof.phi_hat_vec((xi - eta - a.terms[0].c)[None])[0] * prof.phi_hat_vec((eta - u.terms[0].c)[None])[0]
    want = (2 * math.pi) ** -3 * sym * bumps
    assert vals[0] == pytest.approx(want, rel=1e-6)


def test_duhamel_bilinear_is_linear():
    rng = np.random.default_rng(3)
    a1, u = _pair(6)
    a2 = BumpSum((make_term((-64.0, 0, 0), 1.0, (ONE,)),), 1)
    u2 = BumpSum((make_term((64.0, 0, 0), -1.0, U_SYMBOLS),), 3)
    u = BumpSum(u.terms + u2.terms, 3)
    s1, s2 = rng.uniform(0.5, 2, 2)
    row = [X(2) ** 2 / NORM ** 2, ONE - X(1) ** 2 / NORM ** 2, ONE]
    t = 2.0 ** -14
    p = lambda a: pairing(duhamel_bilinear(a, u, row, t, 1.0, out_radius=1.0)).to_float()
    combo = BumpSum(a1.scaled(s1).terms + a2.scaled(s2).terms, 1)
    assert p(combo) == pytest.approx(s1 * p(a1) + s2 * p(a2), rel=1e-7)


# -- pairing -------------------------------------------------------------------

def test_pairing_trivial_cases():
    assert pairing([]).value.is_zero
    c = 64.0
    a = BumpSum((make_term((c, 0, 0), 1.0, (ONE,)),), 1)
    u = BumpSum((make_term((c, 0, 0), 1.0, U_SYMBOLS),), 3)
    boxes = duhamel_bilinear(a, u, [ONE, ONE, ONE], 1e-3, 1.0)
    assert pairing(boxes).value.is_zero


def test_pairing_log_domain_scaling():
    a, u = _pair(6)
    row = [ONE, ONE - X(2) ** 2 / NORM ** 2, ONE]
    t = 2.0 ** -14
    base = pairing(duhamel_bilinear(a, u, row, t, 1.0, out_radius=1.0))
    big_a = a.scaled(LogValue.power_of_two(600.0))
    big_u = u.scaled(LogValue.power_of_two(600.0))
    scaled = pairing(duhamel_bilinear(big_a, big_u, row, t, 1.0, out_radius=1.0))
    assert scaled.value.log2mag - base.value.log2mag == pytest.approx(1200.0, abs=1e-9)
    assert scaled.value.phase == pytest.approx(base.value.phase, abs=1e-12)
    with pytest.raises(OverflowError):
        scaled.to_float()


def test_pairing_sign_and_error_estimate():
    a, u = _pair(6)
    row = [ONE, ONE - X(2) ** 2 / NORM ** 2, ONE]
    res = pairing(duhamel_bilinear(a, u, row, 2.0 ** -14, 1.0, out_radius=1.0))
    assert res.to_float() != 0
    assert res.abs_error <= 1e-6 * abs(res.to_float())


# -- envelope norms ---------------------------------------------------------------

def test_envelope_single_term_sup_is_center_independent():
    prof = default_profile()
    phi0 = float(phi_physical(np.array([0.0]))[0])
    # at large k the block weight is flat across the support: Delta_k f ~ phi(1.5) f
    want = phi0 * float(prof.phi(np.array([1.5]))[0])
    for k in (40, 60):
        f = BumpSum((make_term((1.5 * 2.0 ** k, 0, 0), 1.0, (ONE,)),), 1)
        assert envelope_lp_norm(f, k, math.inf, prof).value == pytest.approx(want, rel=1e-6)


def test_envelope_homogeneity():
    f = BumpSum((make_term((40.0, 0, 0), 1.0, (ONE,)), make_term((-40.0, 0, 0), 1.0, (ONE,))), 1)
    for p in (2.0, 6.0, math.inf):
        a = envelope_lp_norm(f, 5, p).log2_value
        b = envelope_lp_norm(f.scaled(2.0), 5, p).log2_value
        assert b - a == pytest.approx(1.0, abs=1e-12)


def test_envelope_modulation_invariance():
    shift = np.array([0.0, 3.0, -2.0])
    c = 1.5 * 2.0 ** 40
    t1 = [make_term((c, 0, 0), 1.0, (ONE,)), make_term((c + 4, 0, 0), 0.5, (ONE,))]
    t2 = [make_term(tuple(t.c + shift), t.amp, t.symbols) for t in t1]
    for p in (2.0, 4.0, math.inf):
        a = envelope_lp_norm(BumpSum(tuple(t1), 1), 40, p).value
        b = envelope_lp_norm(BumpSum(tuple(t2), 1), 40, p).value
        assert b == pytest.approx(a, rel=1e-9)


def test_envelope_l2_of_cosine_pair_matches_parseval_lattice():
    prof = default_profile()
    c, j = 8.0, 3
    f = BumpSum((make_term((c, 0, 0), 1.0, (ONE,)), make_term((-c, 0, 0), 1.0, (ONE,))), 1)
    got = envelope_lp_norm(f, j, 2.0, prof).value
    # Parseval on a fine lattice: ||Delta_j f||_2^2 = (2 pi)^-3 int |phi(2^-j xi) f_hat|^2
    h = 1 / 16
    g = np.arange(-2.0, 2.0 + h / 2, h)
    G = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    total = 0.0
    for sgn in (1, -1):
        pts = G + [sgn * c, 0, 0]
        spec = f.spectrum(pts, prof)[0] * prof.block_weight(np.linalg.norm(pts, axis=1), j)
        total += float(np.sum(np.abs(spec) ** 2)) * h ** 3
    want = math.sqrt(total / (2 * math.pi) ** 3)
    assert got == pytest.approx(want, rel=1e-6)
