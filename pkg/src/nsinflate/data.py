"""The three initial-data families and their norm certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bump import BumpSum, block_range, envelope_lp_norm, make_term, synthesize_grid
from .logdomain import LogValue, log_sum
from .lp import BesovIndex, besov_norm
from .params import ParamSet, require_feasible
from .profile import default_profile
from .symbols import NORM, ONE, ZERO, X, const

REGIMES = ("THM1", "THM2", "APPENDIX_A")

# Velocity symbol (xi_2, -xi_1, 0) / |xi|
U_SYMBOLS = (X(2) / NORM, -(X(1) / NORM), ZERO)


@dataclass(frozen=True)
class DataFamily:
    regime: str
    a0: BumpSum
    u0: BumpSum
    params: ParamSet

    @property
    def ks(self):
        return range(self.params.k0, self.params.N + 1)


def weights(ps: ParamSet, regime: str):
    """log2 of the a0 and u0 weights per k (before the 1/C(N) factor), as slopes in k."""
    ip = ps.ip
    if regime == "THM1":
        return -3 * ip, 0.5
    if regime == "THM2":
        return -0.5, 1 - 3 * ip
    if regime == "APPENDIX_A":
        return -0.5, 1.0
    raise ValueError(f"unknown regime {regime}")


def build_data(ps: ParamSet, regime: str, check: bool = True, a_scale=1.0, u_scale=1.0) -> DataFamily:
    regime = regime.upper()
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime}")
    if regime == "APPENDIX_A" and not ps.p_is_inf:
        raise ValueError("the appendix regime takes p = inf")
    if check:
        require_feasible(ps, regime)
    if ps.k0 < 1 or ps.N < ps.k0:
        raise ValueError("need 1 <= k0 <= N")
    wa, wu = weights(ps, regime)
    cn = float(ps.CN_log2)
    a_fac = LogValue.from_number(a_scale)
    u_fac = LogValue.from_number(u_scale)
    a_terms, u_terms = [], []
    for k in range(ps.k0, ps.N + 1):
        c = 2.0 ** k
        la = LogValue.power_of_two(float(wa) * k - cn) * a_fac
        lu = LogValue.power_of_two(float(wu) * k - cn) * u_fac
        a_terms.append(make_term((c, 0, 0), la, (ONE,)))
        a_terms.append(make_term((-c, 0, 0), la, (ONE,)))
        u_terms.append(make_term((-c, 0, 0), lu, U_SYMBOLS))
        u_terms.append(make_term((c, 0, 0), -lu, U_SYMBOLS))
    return DataFamily(regime, BumpSum(tuple(a_terms), 1), BumpSum(tuple(u_terms), 3), ps)


def divergence_symbol_residual(u0: BumpSum, xi) -> np.ndarray:
    """|i xi . sigma(xi)| for every term symbol at the sample points."""
    xi = np.asarray(xi, dtype=float)
    worst = np.zeros(len(xi))
    for t in u0.terms:
        acc = sum(1j * xi[:, i] * t.symbols[i](xi) for i in range(3))
        worst = np.maximum(worst, np.abs(acc))
    return worst


def phi_physical(r, profile=None, n=400):
    """phi(x) = (2 pi)^-3 int phi_hat(|xi|) e^{i x.xi} d xi as a function of |x|."""
    profile = profile or default_profile()
    r = np.asarray(r, dtype=float)
    x, w = np.polynomial.legendre.leggauss(n)
    s = x + 1.0  # radius in [0, 2]
    ph = profile.phi_hat(s) * w
    small = r < 1e-8
    rr = np.where(small, 1.0, r)
    val = (np.sin(np.multiply.outer(rr, s)) * s) @ ph / (2 * np.pi ** 2 * rr)
    val0 = (s ** 2) @ ph / (2 * np.pi ** 2)
    return np.where(small, val0, val)


_SPLINES: dict = {}


def _phi_spline(profile, rmax, h=0.01):
    from scipy.interpolate import CubicSpline
    key = (profile.table_hash(), round(rmax, 6))
    if key not in _SPLINES:
        r = np.arange(0.0, rmax + 2 * h, h)
        _SPLINES[key] = CubicSpline(r, phi_physical(r, profile, n=800))
    return _SPLINES[key]


def spatial_u0(data: DataFamily, M: int, L: float, profile=None):
    """Physical-space formula 2/C(N) sum_k w_k {-R2(phi sin(2^k x1)), R1(phi sin(2^k x1)), 0}.

    phi is sampled in physical space (and periodized by summing images),
    the Riesz transforms act by FFT.  With f_hat = int e^{-ix.xi} f this
    equals -u0; the returned field carries that sign so it compares to u0.
    """
    profile = profile or default_profile()
    x = np.arange(M) * L / M
    X1, X2, X3 = np.meshgrid(x, x, x, indexing="ij")
    # images out to distance 2.5 L; phi decays only like a Gevrey function
    images = 2
    spline = _phi_spline(profile, math.sqrt(3) * (images + 1) * L)
    phi = np.zeros_like(X1)
    shifts = range(-images, images + 1)
    for m1 in shifts:
        for m2 in shifts:
            for m3 in shifts:
                d = np.sqrt((X1 - L / 2 + m1 * L) ** 2 + (X2 - L / 2 + m2 * L) ** 2 + (X3 - L / 2 + m3 * L) ** 2)
                phi += spline(d)
    phi = np.roll(phi, (-(M // 2),) * 3, axis=(0, 1, 2))  # center the bump at the origin
    _, wu = weights(data.params, data.regime)
    cn = float(data.params.CN_log2)
    k = 2 * np.pi * np.fft.fftfreq(M, d=1.0 / M) / L
    K1, K2, _ = np.meshgrid(k, k, k, indexing="ij")
    kn = np.sqrt(K1 ** 2 + K2 ** 2 + _ ** 2)
    kn[0, 0, 0] = 1.0
    out = np.zeros((3, M, M, M))
    for kk in data.ks:
        g = phi * np.sin(2.0 ** kk * X1) * 2.0 ** (float(wu) * kk - cn)
        gh = np.fft.fftn(g)
        r1 = np.fft.ifftn(-1j * K1 / kn * gh).real
        r2 = np.fft.ifftn(-1j * K2 / kn * gh).real
        out[0] += -2 * r2
        out[1] += 2 * r1
    return -out


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def linf_norm(f: BumpSum, profile=None):
    """sup |f| for a scalar field whose terms have constant symbols.

    |f(x)| <= sum |amp| |phi(x)| <= sum |amp| phi(0) because phi_hat >= 0; the
    bound is attained at x = 0 when all amplitudes are positive reals.
    Returns (log2 value, exact flag).
    """
    profile = profile or default_profile()
    if f.ncomp != 1 or not all(t.symbols[0].is_constant for t in f.terms):
        raise ValueError("closed-form sup norm needs a scalar field with constant symbols")
    phi0 = float(phi_physical(np.array([0.0]), profile)[0])
    amps = [abs(t.amp) * LogValue.from_number(abs(complex(t.symbols[0](np.ones((1, 3)))[0]))) for t in f.terms]
    total = log_sum(amps) * LogValue.from_number(phi0)
    exact = all(t.amp.is_zero or abs(math.remainder(t.amp.phase, 2 * math.pi)) < 1e-12 for t in f.terms)
    return total.log2mag, exact


def norm_indices(regime: str, ps: ParamSet):
    ip = float(ps.ip)
    if regime == "THM1":
        return BesovIndex(3 * ip, 1 / ip, 1), BesovIndex(-0.5, 6, 1)
    if regime == "THM2":
        return BesovIndex(0.5, 6, 1), BesovIndex(3 * ip - 1, 1 / ip, 1)
    return BesovIndex(0.5, 6, 1), BesovIndex(-1.0, math.inf, 1)


@dataclass
class NormCertificate:
    regime: str
    N: int
    CN_log2: float
    a0_linf_log2: float
    a0_besov_log2: float
    u0_besov_log2: float
    a0_linf_ratio: float
    a0_besov_ratio: float
    u0_besov_ratio: float
    general: list = field(default_factory=list)
    is_bound: bool = False

    def as_dict(self):
        return dict(self.__dict__)


def certify_norms(data: DataFamily, profile=None, general=None, **kw) -> NormCertificate:
    """Measured norms divided by their predictors 1/C(N) (sup norm) and N/C(N) (Besov)."""
    profile = profile or default_profile()
    ps = data.params
    cn = float(ps.CN_log2)
    ia, iu = norm_indices(data.regime, ps)
    linf, _ = linf_norm(data.a0, profile)
    ba = besov_norm(data.a0, ia, profile, **kw)
    bu = besov_norm(data.u0, iu, profile, **kw)
    pred = math.log2(ps.N) - cn
    gen = []
    wa, wu = weights(ps, data.regime)
    for name, s, r in general or []:
        # above the critical index each field is dominated by its top block:
        # predictor 2^{N(s + w)}/C(N) with w the per-k weight of that field
        fld, w = (data.a0, wa) if name == "a0" else (data.u0, wu)
        res = besov_norm(fld, BesovIndex(s, r, 1), profile, **kw)
        gen.append({"field": name, "s": s, "r": r, "log2": res.log2_value,
                    "ratio": 2.0 ** (res.log2_value - (ps.N * (s + float(w)) - cn))})
    return NormCertificate(
        data.regime, ps.N, cn, linf, ba.log2_value, bu.log2_value,
        2.0 ** (linf + cn), 2.0 ** (ba.log2_value - pred), 2.0 ** (bu.log2_value - pred), gen,
        ba.is_bound or bu.is_bound)


# ---------------------------------------------------------------------------
# Direction constant
# ---------------------------------------------------------------------------

def direction_constant(probe=None, weight=None, symbol="13", n_r=24, n_theta=48, n_psi=96) -> float:
    """int phi(2^m xi) w(xi) m(xi) / int phi(2^m xi) w(xi), m = (xi1^2 + xi3^2)/|xi|^2.

    ``symbol="23"`` uses (xi2^2 + xi3^2)/|xi|^2 instead.  ``weight`` is a
    vectorized nonnegative function of xi (default 1).
    """
    from .bump import probe_radial_rule, sphere_rule
    probe = probe or default_profile()
    r, wr = probe_radial_rule(probe, n_r)
    wr = wr * r ** 2 * probe.probe(r)
    om, wom = sphere_rule(n_theta, n_psi, axis=2)
    xi = (r[:, None, None] * om[None]).reshape(-1, 3)
    w = (wr[:, None] * wom[None]).ravel()
    if weight is not None:
        wv = np.asarray(weight(xi), dtype=float)
        if (wv < 0).any():
            raise ValueError("weight must be nonnegative")
        w = w * wv
    a, b = (0, 2) if symbol == "13" else (1, 2)
    m = (xi[:, a] ** 2 + xi[:, b] ** 2) / np.einsum("ij,ij->i", xi, xi)
    val = float(np.sum(w * m) / np.sum(w))
    if not val > 0:
        raise ArithmeticError("direction constant is not positive")
    return val
