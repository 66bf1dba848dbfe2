import math

import numpy as np
import pytest

from nsinflate.bump import synthesize_grid
from nsinflate.data import (build_data, certify_norms, direction_constant, divergence_symbol_residual, linf_norm,
                            phi_physical, spatial_u0)
from nsinflate.params import InfeasibleParams, make_params, preset


def test_single_k_data_thm1():
    ps = preset("THM1", 12, N=6, k0=6)
    d = build_data(ps, "THM1", check=False)
    assert len(d.a0) == 2 and len(d.u0) == 2
    want = -6 * 3 / 12 - float(ps.CN_log2)
    for t in d.a0.terms:
        assert t.amp.log2mag == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("regime,p", [("THM1", 12), ("THM2", 24), ("APPENDIX_A", None)])
def test_term_counts_and_weights(regime, p):
    ps = preset(regime, p, N=30, k0=20)
    d = build_data(ps, regime)
    assert len(d.a0) == 2 * (30 - 20 + 1) == len(d.u0)
    assert d.a0.is_conjugate_symmetric() and d.u0.is_conjugate_symmetric()
    wu = {"THM1": 0.5, "THM2": 1 - 3 / 24, "APPENDIX_A": 1.0}[regime]
    by_k = {round(math.log2(abs(t.c[0]))): t.amp.log2mag for t in d.u0.terms}
    assert by_k[25] - by_k[24] == pytest.approx(wu, abs=1e-12)


def test_infeasible_params_rejected():
    ps = make_params(12, "1/16", "1/8", q="320/77", p0="32/3")
    with pytest.raises(InfeasibleParams) as exc:
        build_data(ps, "THM1")
    assert "2 eps1 < 1/2 - 3/p" in str(exc.value)


def test_divergence_free_symbols():
    d = build_data(preset("THM1", 12, N=12, k0=4), "THM1", check=False)
    xi = np.random.default_rng(0).normal(scale=100, size=(10 ** 4, 3))
    assert divergence_symbol_residual(d.u0, xi).max() <= 1e-12


def test_spatial_u0_matches_grid_synthesis():
    # one frequency and a wide period keep the image sum of the physical bump well converged
    ps = preset("THM1", 12, N=2, k0=2)
    d = build_data(ps, "THM1", check=False)
    M, L = 64, 8 * math.pi
    grid = synthesize_grid(d.u0, M, L)
    assert np.abs(grid.imag).max() <= 1e-10 * np.abs(grid.real).max()
    phys = spatial_u0(d, M, L)
    assert np.abs(phys - grid.real).max() <= 1e-6 * np.abs(grid.real).max()


def test_a0_sup_norm_closed_form():
    # a0(0) = (2 pi)^-3 int a0_hat, by a fine Riemann sum of the spectrum around each bump
    ps = preset("THM1", 12, N=4, k0=2)
    d = build_data(ps, "THM1", check=False)
    log2v, exact = linf_norm(d.a0)
    assert exact
    h = 0.05
    g = np.arange(-2.0, 2.0 + h / 2, h)
    box = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    total = sum(d.a0.spectrum(box + t.c)[0].sum() for t in d.a0.terms) * h ** 3 / (2 * math.pi) ** 3
    # bumps at distinct frequencies do not overlap, so each lattice patch counts one term
    assert abs(total.imag) <= 1e-12 * abs(total)
    assert 2.0 ** log2v == pytest.approx(total.real, rel=1e-6)


def test_certificate_homogeneity():
    ps = preset("THM1", 12, N=40, k0=30)
    base = certify_norms(build_data(ps, "THM1"))
    dbl = certify_norms(build_data(ps, "THM1", a_scale=2.0, u_scale=2.0))
    for name in ("a0_linf_log2", "a0_besov_log2", "u0_besov_log2"):
        assert getattr(dbl, name) - getattr(base, name) == pytest.approx(1.0, abs=1e-9)


def test_certificate_ratios_bounded():
    out = []
    for N in (20, 30, 40):
        c = certify_norms(build_data(preset("THM1", 12, N=N, k0=4), "THM1"))
        out.append(c)
    for name in ("a0_besov_ratio", "u0_besov_ratio"):
        vals = [getattr(c, name) for c in out]
        assert max(vals) / min(vals) <= 2


def test_general_index_bound_for_u0():
    ratios = []
    for N in (12, 16, 20):
        c = certify_norms(build_data(preset("THM1", 12, N=N, k0=4), "THM1"), general=[("u0", 0.5, 6.0)])
        ratios.append(c.general[0]["ratio"])
    assert max(ratios) / min(ratios) <= 2


def test_phi_physical_normalization():
    # phi(0) = (2 pi)^-3 int phi_hat, computed with an independent radial rule
    from scipy.integrate import quad
    from nsinflate.profile import default_profile
    prof = default_profile()
    val = quad(lambda r: 4 * math.pi * r * r * prof.phi_hat(np.array([r]))[0], 0, 2, limit=200, epsabs=0,
               epsrel=1e-12)[0] / (2 * math.pi) ** 3
    assert float(phi_physical(np.array([0.0]))[0]) == pytest.approx(val, rel=1e-9)


def test_direction_constant():
    assert direction_constant() == pytest.approx(2 / 3, abs=1e-10)
    assert direction_constant(symbol="23") == pytest.approx(2 / 3, abs=1e-10)
    narrow = lambda xi: np.exp(-((xi[:, 0] ** 2 + xi[:, 2] ** 2) / np.einsum("ij,ij->i", xi, xi)) * 400)
    a = direction_constant(weight=narrow)
    assert 0 < a < 0.01
