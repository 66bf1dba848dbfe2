"""Inflation functionals B1, B2 of the first Duhamel iterate and their sweeps.

U1 = mu int_0^t e^{mu Lap (t - tau)} (Id + |D|^-2 grad div)(a0 Lap U0) dtau with
U0 = e^{mu Lap t} u0.  Its second component splits by the two entries of the
projector acting on the second and first components of a0 Lap U0:
m22 = 1 - xi2^2/|xi|^2 gives U11 and m21 = -xi1 xi2/|xi|^2 gives U12.  B1 and
B2 are the pairings of U11 and U12 with the probe phi(2^m xi).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bump import (INV_2PI3, BumpSum, Channel, PairBoxIntegrand, PairingResult, _probe_moments, aa_kernel,
                   duhamel_bilinear, duhamel_convective, gauss, gauss_panels, pairing)
from .data import DataFamily, build_data
from .logdomain import ZERO, LogValue, log_sum
from .params import ParamSet, preset
from .profile import DyadicProfile, default_profile
from .symbols import NORM, ZERO as SZERO, X, const, leray_entry

M22 = leray_entry(2, 2)
M21 = leray_entry(2, 1)
# turns the even probe into an odd one; along xi_2 the dominant Upsilon1
# channel i xi_2 (U0^2 U0^2)^ gives a nonvanishing leading term
ODD_WEIGHT = X(2) / NORM


def _near_radius(profile):
    return profile.probe_radii[1]


@dataclass
class U1Assembly:
    data: DataFamily
    t: float
    boxes_11: list
    boxes_12: list
    xi_boxes: list = field(default_factory=list)
    upsilon_boxes: list = field(default_factory=list)
    profile: DyadicProfile | None = None

    @property
    def mu(self) -> float:
        return self.data.params.mu

    @property
    def N(self) -> int:
        return self.data.params.N


def _tag(boxes, label):
    return [replace(b, tag=f"{label} {b.c_f[0]:+.6g} {b.c_g[0]:+.6g}") for b in boxes]


def assemble_u1(data: DataFamily, t: float, profile=None, out_radius="probe") -> U1Assembly:
    """Pair boxes of the second component of U1 (and of Upsilon1 in the appendix regime).

    ``out_radius="probe"`` keeps the boxes whose support meets the probe
    annulus; ``None`` keeps every box, including the far ones near
    +-2^{k+1} e1.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    profile = profile or default_profile()
    rad = _near_radius(profile) if out_radius == "probe" else out_radius
    mu = data.params.mu
    b11 = _tag(duhamel_bilinear(data.a0, data.u0, [SZERO, M22, SZERO], t, mu, out_radius=rad), "U11")
    b12 = _tag(duhamel_bilinear(data.a0, data.u0, [M21, SZERO, SZERO], t, mu, out_radius=rad), "U12")
    asm = U1Assembly(data, float(t), b11, b12, profile=profile)
    if data.regime == "APPENDIX_A":
        asm.xi_boxes = b11 + b12
        asm.upsilon_boxes = _tag(upsilon_boxes(data.u0, t, mu, out_radius=rad), "Y1")
    return asm


def upsilon_boxes(u0: BumpSum, t: float, mu: float, out_radius=None) -> list:
    """Boxes of the second component of int e^{mu Lap (t - tau)} (-P)(U0 . grad U0) dtau.

    P = Id + |D|^-2 grad div.  U0 . grad U0 is taken in divergence form
    i xi_l (U0^l U0^c)^ so that no large cancellation occurs between the
    l-summands; the projector entries -P_{2c}(xi) sit in the output symbol.
    """
    boxes = []
    pref = LogValue.from_number(INV_2PI3)
    for tf in u0.terms:
        if tf.amp.is_zero:
            continue
        for tg in u0.terms:
            if tg.amp.is_zero:
                continue
            shift = tf.c + tg.c
            if out_radius is not None and np.linalg.norm(shift) > 4.0 + out_radius:
                continue
            chans = []
            for c in range(3):
                if tg.symbols[c].op == "const" and tg.symbols[c].args[0] == 0:
                    continue
                for l in range(3):
                    if tf.symbols[l].op == "const" and tf.symbols[l].args[0] == 0:
                        continue
                    out = -(const(1j) * X(l + 1) * leray_entry(2, c + 1))
                    chans.append(Channel(tf.symbols[l], tg.symbols[c], out))
            if chans:
                boxes.append(PairBoxIntegrand(tf.center, tg.center, pref * tf.amp * tg.amp,
                                              tuple(chans), float(t), float(mu), "fg"))
    return boxes


# ---------------------------------------------------------------------------
# B1, B2
# ---------------------------------------------------------------------------

@dataclass
class Functional:
    """A signed pairing value with its quadrature error and leading-order predictor."""

    name: str
    value: LogValue
    error: LogValue
    predictor: LogValue
    taylor_regime: bool
    levels: int = 0
    boxes: int = 0

    @property
    def log2_abs(self) -> float:
        return self.value.log2mag

    @property
    def sign(self) -> float:
        if self.value.is_zero:
            return 0.0
        return math.copysign(1.0, math.cos(self.value.phase))

    def to_float(self) -> float:
        return self.value.to_float()

    @property
    def rel_error(self) -> float:
        if self.value.is_zero:
            return 0.0 if self.error.is_zero else math.inf
        return 2.0 ** (self.error.log2mag - self.value.log2mag)

    def as_dict(self):
        return {"name": self.name, "value": self.to_float(), "log2_abs": self.log2_abs, "sign": self.sign,
                "rel_error": self.rel_error, "predictor": self.predictor.to_float(),
                "taylor_regime": self.taylor_regime, "levels": self.levels, "boxes": self.boxes}


def _bump_sq_integral(profile):
    """int phi_hat(zeta)^2 d zeta."""
    r, w = gauss_panels([0.0, 1.0, 2.0], [24, 64])
    return float(4 * np.pi * np.sum(w * r ** 2 * profile.phi_hat(r) ** 2))


def _leading_predictor(boxes, profile):
    """Sum over near-origin boxes of amp * A(t; 0, |c_g|^2) f(c_f) g(c_g) int probe out * int phi_hat^2.

    This is the value of the pairing when the inner convolution is replaced
    by its value at the bump centres, the t-linear leading order for
    t 2^{2N} << 1.
    """
    q = _bump_sq_integral(profile)
    parts = []
    for b in boxes:
        if np.linalg.norm(b.shift) > 1e-9 * max(1.0, np.linalg.norm(b.c_g)):
            continue
        cg, cf = np.asarray(b.c_g, float)[None], np.asarray(b.c_f, float)[None]
        lam = max(1.0, float(np.linalg.norm(cg)))
        acc = 0j
        log_scale = None
        for ch in b.channels:
            pm = complex(_probe_moments(profile, ch.out_sym, 0)[0])
            dg = ch.g_sym.degree()
            if dg is not None:
                gv = complex(np.asarray(ch.g_sym(cg / lam))[0])
                sc = dg * math.log2(lam)
            else:
                gv, sc = complex(np.asarray(ch.g_sym(cg))[0]), 0.0
            fv = complex(np.asarray(ch.f_sym(cf))[0])
            if log_scale is None:
                log_scale = sc
            acc += pm * fv * gv * 2.0 ** (sc - log_scale)
        ker = aa_kernel(b.t, 0.0, float(np.sum(cg * cg)), b.mu)
        if acc != 0 and ker != 0:
            parts.append(LogValue.from_number(acc * q) * LogValue.from_number(ker) * b.amp.scale2(log_scale))
    return log_sum(parts)


def _functional(name, boxes, asm, rtol, **kw):
    profile = asm.profile or default_profile()
    res = pairing(boxes, profile, rtol=rtol, **kw)
    regime = asm.t * 4.0 ** asm.N < 1
    return Functional(name, res.value, res.error, _leading_predictor(boxes, profile), regime,
                      res.levels, res.boxes)


def compute_B1(asm: U1Assembly, rtol: float = 1e-8, **kw) -> Functional:
    """int phi(2^m xi) U11^2_hat(xi) d xi by adaptive quadrature."""
    return _functional("B1", asm.boxes_11, asm, rtol, **kw)


def compute_B2(asm: U1Assembly, rtol: float = 1e-4, **kw) -> Functional:
    """int phi(2^m xi) U12^2_hat(xi) d xi.

    The leading t-linear term vanishes by the xi_1 reflection, so B2 is many
    orders below B1; the default tolerance is looser accordingly.
    """
    return _functional("B2", asm.boxes_12, asm, rtol, **kw)


def pairing_total(asm: U1Assembly, rtol: float = 1e-8) -> PairingResult:
    """int phi(2^m xi) U1^2_hat(xi) d xi from boxes carrying both projector entries."""
    d = asm.data
    boxes = duhamel_bilinear(d.a0, d.u0, [M21, M22, SZERO], asm.t, d.params.mu,
                             out_radius=_near_radius(asm.profile or default_profile()))
    return pairing(boxes, asm.profile, rtol=rtol, atol_rel=rtol)


# ---------------------------------------------------------------------------
# Lower-bound chain
# ---------------------------------------------------------------------------

def _rho(s, profile, n=48):
    """(phi_hat * phi_hat)(s) for a radial bump, as a function of |xi| = s."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    r, wr = gauss_panels([0.0, 1.0, 2.0], [n, 2 * n])
    xs, ws = np.polynomial.legendre.leggauss(24)
    out = np.empty_like(s)
    for i, si in enumerate(s):
        if si < 1e-12:
            out[i] = 4 * np.pi * np.sum(wr * r ** 2 * profile.phi_hat(r) ** 2)
            continue
        a, b = np.abs(si - r), si + r
        u = 0.5 * (b - a)[:, None] * (xs[None] + 1) + a[:, None]
        inner = 0.5 * (b - a) * np.sum(ws[None] * u * profile.phi_hat(u), axis=1)
        out[i] = 2 * np.pi / si * np.sum(wr * r * profile.phi_hat(r) * inner)
    return out


_LEAD_CACHE: dict = {}


def _leading_block_norms(kvec, profile, js=range(-30, 3), M=64, period=16 * math.pi):
    """||Delta_j F^-1[rho(|xi|) P(xi) kvec]||_p for p = 6 and inf, P the projector.

    Block j is computed on the rescaled variable xi = 2^j xi' so that one
    grid serves every j:  ||Delta_j V||_p = 2^{3j(1 - 1/p)} ||W_j||_p.
    """
    key = (profile.table_hash(), tuple(np.round(kvec, 14)), tuple(js), M, period)
    if key in _LEAD_CACHE:
        return _LEAD_CACHE[key]
    k = 2 * np.pi * np.fft.fftfreq(M, d=period / M)
    K = np.stack(np.meshgrid(k, k, k, indexing="ij"))
    kn = np.sqrt(np.sum(K * K, axis=0))
    safe = np.where(kn == 0, 1.0, kn)
    proj = np.eye(3)[:, :, None, None, None] - K[:, None] * K[None, :] / safe ** 2
    col = np.einsum("ij...,j->i...", proj, np.asarray(kvec, dtype=complex))
    blk = profile.phi(kn)
    mask = blk > 0
    radii = np.unique(np.round(kn[mask], 12))
    out = {}
    dv = (period / M) ** 3
    for j in js:
        rho = np.zeros_like(kn)
        rho[mask] = np.interp(kn[mask] * 2.0 ** j, radii * 2.0 ** j, _rho(radii * 2.0 ** j, profile))
        spec = col * (blk * rho)[None]
        w = np.fft.ifftn(spec, axes=(1, 2, 3)) * (M / period) ** 3
        mod = np.sqrt(np.sum(np.abs(w) ** 2, axis=0))
        l6 = float(np.sum(mod ** 6) * dv) ** (1 / 6)
        linf = float(mod.max())
        out[j] = (l6 * 2.0 ** (3 * j * 5 / 6), linf * 2.0 ** (3 * j))
    _LEAD_CACHE[key] = out
    return out


@dataclass
class InflationReport:
    N: int
    t: float
    B1: Functional
    B2: Functional
    pairing: PairingResult
    lower_bound: float
    besov_m12: float
    binf: float
    factorization_error: float
    is_bound: bool = False

    @property
    def ratio_binf_pairing(self):
        p = abs(self.pairing.to_float())
        return self.binf / p if p else math.inf

    @property
    def ratio_besov_binf(self):
        return self.besov_m12 / self.binf if self.binf else math.inf

    def as_dict(self):
        return {"N": self.N, "t": self.t, "t_log2": math.log2(self.t) if self.t > 0 else -math.inf,
                "B1": self.B1.to_float(), "B2": self.B2.to_float(),
                "pairing": self.pairing.to_float(), "pairing_error": self.pairing.abs_error,
                "lower_bound": self.lower_bound, "besov": self.besov_m12, "binf": self.binf,
                "ratio_binf_pairing": self.ratio_binf_pairing, "ratio_besov_binf": self.ratio_besov_binf,
                "factorization_error": self.factorization_error, "is_bound": self.is_bound}


def leading_vector(asm: U1Assembly) -> np.ndarray:
    """K_c in U1_hat ~ rho(|xi|) P(xi) K near the origin, as a plain complex vector.

    K_c sums mu (2 pi)^-3 amp_a amp_u sigma_c(c_g) (-|c_g|^2) A(t; 0, |c_g|^2)
    over term pairs whose supports overlap at the origin.
    """
    d = asm.data
    mu = d.params.mu
    acc = [[], [], []]
    for ta in d.a0.terms:
        for tu in d.u0.terms:
            if np.linalg.norm(ta.c + tu.c) > 1e-9 * max(1.0, np.linalg.norm(tu.c)):
                continue
            cg = tu.c[None]
            eta2 = float(np.sum(cg * cg))
            base = ta.amp * tu.amp * LogValue.from_number(mu * INV_2PI3 * -eta2 * aa_kernel(asm.t, 0.0, eta2, mu))
            base = base * LogValue.from_number(complex(np.asarray(ta.symbols[0](-cg))[0]))
            for c in range(3):
                v = complex(np.asarray(tu.symbols[c](cg))[0])
                if v != 0:
                    acc[c].append(base * LogValue.from_number(v))
    return np.array([log_sum(a).to_complex() for a in acc])


def lower_bound_chain(asm: U1Assembly, data: DataFamily | None = None, rtol: float = 1e-8) -> InflationReport:
    """B1, B2, the full pairing and the two negative-regularity norms of U1.

    The norms use the leading-order form U1_hat ~ rho(|xi|) P(xi) K near the
    origin (rho = phi_hat * phi_hat), whose relative error is reported by
    comparing its probe pairing with the quadrature value.  The far boxes
    near |xi| ~ 2^{k+1} carry relative weight 2^{-k/2} in both norms and are
    left out.
    """
    profile = asm.profile or default_profile()
    b1 = compute_B1(asm, rtol=rtol)
    b2 = compute_B2(asm)
    pr = pairing_total(asm, rtol=rtol)
    lb = abs(b1.to_float()) - abs(b2.to_float())
    kvec = leading_vector(asm)
    if not np.any(kvec):
        z = 0.0
        return InflationReport(asm.N, asm.t, b1, b2, pr, lb, z, z, 0.0)
    scale = float(np.abs(kvec).max())
    blocks = _leading_block_norms(kvec / scale, profile)
    besov = scale * sum(2.0 ** (-j / 2) * v[0] for j, v in blocks.items())
    binf = scale * max(2.0 ** (-j) * v[1] for j, v in blocks.items())
    # the factorized pairing: K_2 int probe rho m22 ~ K_2 rho(0) int probe m22, plus the m21 part
    lead_pair = (kvec[1] * complex(_probe_moments(profile, M22, 0)[0])
                 + kvec[0] * complex(_probe_moments(profile, M21, 0)[0])) * _rho(0.0, profile)[0]
    pv = pr.to_float()
    fact_err = abs(lead_pair.real - pv) / abs(pv) if pv else 0.0
    return InflationReport(asm.N, asm.t, b1, b2, pr, lb, besov, binf, fact_err)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    N: int
    t_log2: float
    B1: Functional
    B2: Functional

    @property
    def log2_B1(self):
        return self.B1.log2_abs

    @property
    def log2_B2(self):
        return self.B2.log2_abs

    @property
    def lower(self) -> float:
        """log2(|B1| - |B2|), computed without leaving the log domain."""
        d = self.log2_B2 - self.log2_B1
        if d >= 0:
            return -math.inf
        return self.log2_B1 + math.log2(-math.expm1(d * math.log(2)))

    @property
    def ratio_log2(self):
        return self.log2_B2 - self.log2_B1

    def as_dict(self):
        return {"N": self.N, "t_log2": self.t_log2, "B1": self.B1.to_float(), "B2": self.B2.to_float(),
                "log2_B1": self.log2_B1, "log2_B2": self.log2_B2, "log2_lower": self.lower,
                "log2_ratio": self.ratio_log2, "B1_rel_error": self.B1.rel_error,
                "B2_rel_error": self.B2.rel_error, "taylor_regime": self.B1.taylor_regime}


@dataclass
class SweepTable:
    regime: str
    p: object
    k0: int
    rows: list
    slope: float
    slope_error: float
    expected: float
    ratio_monotone: bool
    ratio_slope: float
    params: list = field(default_factory=list)

    @property
    def slope_rel_deviation(self):
        return abs(self.slope - self.expected) / abs(self.expected)

    def as_dict(self):
        return {"regime": self.regime, "p": str(self.p), "k0": self.k0, "slope": self.slope,
                "slope_error": self.slope_error, "expected": self.expected,
                "slope_rel_deviation": self.slope_rel_deviation, "ratio_monotone": self.ratio_monotone,
                "ratio_slope": self.ratio_slope, "rows": [r.as_dict() for r in self.rows],
                "params": self.params}


def fit_slope(x, y, sy=None):
    """Least-squares slope of y against x and its standard error from sy."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    xm = x - x.mean()
    sxx = float(xm @ xm)
    slope = float(xm @ (y - y.mean())) / sxx
    if sy is None:
        return slope, 0.0
    sy = np.asarray(sy, float)
    return slope, float(np.sqrt(np.sum((xm / sxx) ** 2 * sy ** 2)))


def sweep_point(ps: ParamSet, regime: str, t: float | None = None, profile=None, rtol: float = 1e-8) -> SweepRow:
    data = build_data(ps, regime)
    t = ps.T0 if t is None else t
    asm = assemble_u1(data, t, profile)
    return SweepRow(ps.N, math.log2(t), compute_B1(asm, rtol=rtol), compute_B2(asm))


def _sweep_worker(args):
    return sweep_point(*args)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NSINFLATE_THREADS", "1")))
    except ValueError:
        return 1


def inflation_sweep(p, regime: str, N_list, k0: int | None = None, mu: float = 1.0, t_fixed: float | None = None,
                    profile=None, rtol: float = 1e-8, workers: int | None = None) -> SweepTable:
    """B1 and B2 at t = T0(N) for each N, and the fitted growth rate of |B1| - |B2|.

    ``k0=None`` starts the frequency sum 16 octaves below the smallest N so
    that the geometric k-sum is saturated at every point; a fixed ``t_fixed``
    isolates the N-exponents instead of following T0(N).
    """
    regime = regime.upper()
    N_list = sorted(int(n) for n in N_list)
    if len(N_list) < 2:
        raise ValueError("a sweep needs at least two values of N")
    if k0 is None:
        k0 = max(1, N_list[0] - 16)
    plist = [preset(regime, p, N, k0, mu) for N in N_list]
    jobs = [(ps, regime, t_fixed, profile, rtol) for ps in plist]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_sweep_worker, jobs))
    else:
        rows = [sweep_point(*j) for j in jobs]
    y = [r.lower for r in rows]
    sy = [max(r.B1.rel_error, 1e-16) / math.log(2) for r in rows]
    slope, serr = fit_slope(N_list, y, sy)
    ratios = [r.ratio_log2 for r in rows]
    monotone = all(b < a for a, b in zip(ratios, ratios[1:]))
    rslope, _ = fit_slope(N_list, ratios)
    expected = float(plist[0].inflation_rate)
    return SweepTable(regime, plist[0].p, k0, rows, slope, serr, expected, monotone, rslope,
                      [ps.as_dict() for ps in plist])


# ---------------------------------------------------------------------------
# Appendix A
# ---------------------------------------------------------------------------

def _odd_probe(boxes):
    return [replace(b, channels=tuple(Channel(c.f_sym, c.g_sym, c.out_sym * ODD_WEIGHT) for c in b.channels))
            for b in boxes]


@dataclass
class AppendixSplit:
    N: int
    xi_even: PairingResult
    xi_odd: PairingResult
    upsilon_even: PairingResult
    upsilon_odd: PairingResult

    @property
    def xi_contribution(self) -> LogValue:
        return max(abs(self.xi_even.value), abs(self.xi_odd.value), key=lambda v: v.log2mag)

    @property
    def upsilon_contribution(self) -> LogValue:
        return max(abs(self.upsilon_even.value), abs(self.upsilon_odd.value), key=lambda v: v.log2mag)

    @property
    def ratio_log2(self) -> float:
        return self.upsilon_contribution.log2mag - self.xi_contribution.log2mag

    def as_dict(self):
        f = lambda r: r.to_float()
        return {"N": self.N, "xi_even": f(self.xi_even), "xi_odd": f(self.xi_odd),
                "upsilon_even": f(self.upsilon_even), "upsilon_odd": f(self.upsilon_odd),
                "xi_log2": self.xi_contribution.log2mag, "upsilon_log2": self.upsilon_contribution.log2mag,
                "ratio_log2": self.ratio_log2}


def appendixA_split(asm: U1Assembly, rtol: float = 1e-4, parity: bool = True) -> AppendixSplit:
    """Pairings of the Xi1 and Upsilon1 parts against the even probe and the odd probe.

    The odd probe is phi(2^m xi) xi_2/|xi|.
    u0 is even in x and a0 is even, so Xi1 is even and Upsilon1 (one
    derivative of a product of even fields) is odd.  Each part is therefore
    seen by exactly one of the two probes; the other pairing vanishes by
    symmetry and, with ``parity=True``, is set to zero without quadrature.
    The contribution of each part is its largest probe response.
    """
    if asm.data.regime != "APPENDIX_A":
        raise ValueError("the split needs the appendix regime")
    prof = asm.profile or default_profile()

    def pr(boxes, atol=None):
        return pairing(boxes, prof, rtol=rtol, atol_rel=rtol, atol=atol)

    zero = PairingResult(ZERO, ZERO)
    xi_e = pr(asm.xi_boxes)
    ups_o = pr(_odd_probe(asm.upsilon_boxes))
    if parity:
        xi_o, ups_e = zero, zero
    else:
        # these vanish by symmetry; hold them to rtol times their partner
        xi_o = pr(_odd_probe(asm.xi_boxes), abs(xi_e.value).scale2(math.log2(rtol)))
        ups_e = pr(asm.upsilon_boxes, abs(ups_o.value).scale2(math.log2(rtol)))
    return AppendixSplit(asm.N, xi_e, xi_o, ups_e, ups_o)


# ---------------------------------------------------------------------------
# Monte-Carlo oracle
# ---------------------------------------------------------------------------

@dataclass
class MCEstimate:
    value: float
    sigma: float
    n_samples: int
    flagged: bool = False

    def agrees(self, other: float, k: float = 3.0) -> bool:
        return abs(self.value - other) <= k * self.sigma

    def as_dict(self):
        return {"value": self.value, "sigma": self.sigma, "n_samples": self.n_samples, "flagged": self.flagged}


_MC_ROWS = {"B1": (SZERO, M22, SZERO), "B2": (M21, SZERO, SZERO)}


def mc_oracle(data: DataFamily, t: float, probe: DyadicProfile | None = None, n_samples: int = 10 ** 6,
              seed: int = 0, functional: str = "B1", n_tau: int = 12, batch: int = 50000,
              antithetic: bool | None = None, control: bool | None = None) -> MCEstimate:
    """Monte-Carlo estimate of the (xi, eta, tau) integral defining B1 or B2.

    xi is uniform on the probe ball, eta = c + zeta with c a u0 term centre
    picked uniformly and zeta uniform on the ball of radius 2, and the tau
    integral uses Gauss-Legendre nodes on [0, t] applied to the two heat
    factors directly.  The spectra are summed term by term from the fields
    themselves, so no box, kernel closed form or quadrature rule of the main
    path is used.

    B2 is many orders below the size of its integrand, so for it two
    variance reductions are on by default.  ``antithetic`` averages each draw
    over the four sign flips of the first two coordinates of (xi, zeta),
    under which the sampling law is invariant.  ``control`` subtracts the
    same integrand with a0_hat(xi - eta) replaced by its first-order Taylor
    polynomial about xi = 0; that control has mean exactly zero because the
    probe times m21 integrates to zero against any radial function and the
    linear term is odd in xi.  ``n_samples`` counts integrand evaluations.
    Philox streams keep the result reproducible for a given seed.
    """
    if n_samples < 10 ** 4:
        raise ValueError("n_samples must be at least 10^4")
    profile = probe or default_profile()
    row = _MC_ROWS[functional]
    mu = data.params.mu
    lo, hi = profile.probe_radii
    centers = np.array([tm.c for tm in data.u0.terms])
    n_c = len(centers)
    vol_xi = 4 / 3 * np.pi * hi ** 3
    vol_eta = 4 / 3 * np.pi * 2.0 ** 3
    a_zero = all(tm.amp.is_zero for tm in data.a0.terms)
    u_zero = all(tm.amp.is_zero for tm in data.u0.terms)
    if a_zero or u_zero or t == 0:
        return MCEstimate(0.0, 0.0, n_samples)
    tau_x, tau_w = gauss(n_tau, 0.0, t)
    odd = functional == "B2"
    antithetic = odd if antithetic is None else antithetic
    control = odd if control is None else control
    if control and not odd:
        raise ValueError("the zero-mean control variate only applies to B2")
    if control and not all(tm.symbols[0].is_constant for tm in data.a0.terms):
        raise ValueError("the control variate needs constant a0 symbols")
    a_centers = np.array([tm.c for tm in data.a0.terms])
    a_amps = np.array([tm.amp.to_complex() * complex(np.asarray(tm.symbols[0](np.ones((1, 3))))[0])
                       for tm in data.a0.terms])

    def a_taylor(xi, eta):
        """a0_hat(-eta) + xi . grad a0_hat(-eta)."""
        val = np.zeros(len(xi), dtype=complex)
        for c, amp in zip(a_centers, a_amps):
            v = -eta - c
            r = np.linalg.norm(v, axis=1)
            dr = profile.phi_hat_derivative(r) / np.where(r > 0, r, 1.0)
            val += amp * (profile.phi_hat(r) + dr * np.einsum("ij,ij->i", xi, v))
        return val

    flips = [np.array(f) for f in ((1, 1, 1), (-1, 1, 1), (1, -1, 1), (-1, -1, 1))] if antithetic else [np.ones(3)]

    def integrand(xi, eta):
        inside = np.zeros(len(xi))
        for c in centers:
            inside += np.sum((eta - c) ** 2, axis=1) < 4.0
        q = inside / (n_c * vol_eta)
        a_hat = data.a0.spectrum(xi - eta, profile)[0]
        if control:
            a_hat = a_hat - a_taylor(xi, eta)
        u_hat = data.u0.spectrum(eta, profile)
        xn = np.linalg.norm(xi, axis=1)
        eta2 = np.sum(eta * eta, axis=1)
        heat = np.zeros(len(xi))
        for tx, tw in zip(tau_x, tau_w):
            heat += tw * np.exp(-mu * (t - tx) * xn ** 2) * np.exp(-mu * tx * eta2)
        g = np.zeros(len(xi), dtype=complex)
        # the probe vanishes near xi = 0, so any finite symbol value serves there
        safe = np.where((xn > 0)[:, None], xi, 1.0)
        for c, m in enumerate(row):
            if m.op == "const" and m.args[0] == 0:
                continue
            g += np.asarray(m(safe)) * u_hat[c]
        f = mu * INV_2PI3 * profile.probe(xn) * a_hat * g * (-eta2) * heat
        return (f * vol_xi / q).real

    groups = max(2, n_samples // len(flips))
    sums = []
    rng = np.random.Generator(np.random.Philox(seed))
    done = 0
    while done < groups:
        n = min(batch, groups - done)
        done += n
        xi = _uniform_ball(rng, n, hi)
        c = centers[rng.integers(n_c, size=n)]
        zeta = _uniform_ball(rng, n, 2.0)
        acc = np.zeros(n)
        for f in flips:
            acc += integrand(xi * f, c + zeta * f)
        sums.append(acc / len(flips))
    w = np.concatenate(sums)
    mean = float(w.mean())
    sigma = float(w.std(ddof=1) / math.sqrt(len(w)))
    half = len(w) // 2
    s1, s2 = w[:half].std(), w[half:].std()
    flagged = bool(min(s1, s2) > 0 and max(s1, s2) / min(s1, s2) > 1.5) or bool(
        np.abs(w).max() > 0.1 * np.abs(w).sum())
    return MCEstimate(mean, sigma, len(w) * len(flips), flagged)


def _uniform_ball(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.random(n)[:, None] ** (1 / 3)
