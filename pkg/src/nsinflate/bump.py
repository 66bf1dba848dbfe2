"""Exact Fourier-side calculus for sums of shifted bumps.

A ``BumpSum`` is a finite sum of terms ``amp * sym(xi) * phi_hat(xi - center)``
(one symbol per vector component).  Products of two such fields are handled
box by box: each pair of terms produces a ``PairBoxIntegrand`` supported in
the Minkowski sum of the two balls, and ``pairing`` integrates the boxes
against the probe annulus phi(2^m xi) with adaptive tensor quadrature.
Amplitudes live in the log domain so frequencies 2^N with N in the hundreds
never overflow.

Fourier convention: f_hat(xi) = int exp(-i x.xi) f(x) dx, hence
F(fg) = (2 pi)^-3 f_hat * g_hat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .logdomain import ZERO, LogValue, from_scaled, log_sum
from .profile import DyadicProfile, default_profile
from .symbols import NORM, Sym, as_sym, const, parse, sphere_quadratic

BUMP_RADIUS = 2.0
INV_2PI3 = (2 * math.pi) ** -3


class QuadratureError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SupportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Terms and sums
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    center: tuple
    amp: LogValue
    symbols: tuple
    quadrature_only: bool = False

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


def make_term(center, amp, symbols) -> Term:
    if not isinstance(amp, LogValue):
        amp = LogValue.from_number(amp)
    if isinstance(symbols, Sym) or not isinstance(symbols, (tuple, list)):
        symbols = (as_sym(symbols),)
    symbols = tuple(as_sym(s) for s in symbols)
    center = tuple(float(x) for x in center)
    singular = any(s.is_singular for s in symbols)
    return Term(center, amp, symbols, singular and math.dist(center, (0, 0, 0)) <= BUMP_RADIUS)


@dataclass(frozen=True)
class BumpSum:
    terms: tuple
    ncomp: int = 1

    def __post_init__(self):
        for t in self.terms:
            if len(t.symbols) != self.ncomp:
                raise ValueError("term symbol count does not match component count")

    def __len__(self):
        return len(self.terms)

    def scaled(self, factor) -> "BumpSum":
        if not isinstance(factor, LogValue):
            factor = LogValue.from_number(factor)
        return BumpSum(tuple(replace(t, amp=t.amp * factor) for t in self.terms), self.ncomp)

    def component(self, i: int) -> "BumpSum":
        terms = tuple(replace(t, symbols=(t.symbols[i],)) for t in self.terms)
        return BumpSum(terms, 1)

    def spectrum(self, xi, profile: DyadicProfile | None = None, t: float | None = None) -> np.ndarray:
        """Evaluate the transform at points xi (..., 3); shape (ncomp, ...)."""
        profile = profile or default_profile()
        xi = np.asarray(xi, dtype=float)
        out = np.zeros((self.ncomp,) + xi.shape[:-1], dtype=complex)
        for term in self.terms:
            bump = profile.phi_hat_vec(xi - term.c)
            mask = bump > 0
            if not mask.any():
                continue
            amp = term.amp.to_complex()
            for i, sym in enumerate(term.symbols):
                vals = np.zeros(xi.shape[:-1], dtype=complex)
                vals[mask] = sym(xi[mask], t=t)
                out[i] += amp * vals * bump
        return out

    def is_conjugate_symmetric(self, profile=None, samples: int = 64, seed: int = 0) -> bool:
        """Structural and sampled check of f_hat(-xi) = conj(f_hat(xi))."""
        centers = {tuple(np.round(t.c, 9)) for t in self.terms}
        if any(tuple(np.round(-np.asarray(c), 9)) not in centers for c in centers):
            return False
        rng = np.random.default_rng(seed)
        scale = max((abs(t.amp.log2mag) for t in self.terms if not t.amp.is_zero), default=0.0)
        if scale > 900:
            return True
        pts = []
        for t in self.terms:
            v = rng.normal(size=(samples, 3))
            v *= (BUMP_RADIUS * rng.random(samples) ** (1 / 3) / np.linalg.norm(v, axis=1))[:, None]
            pts.append(t.c + v)
        pts = np.concatenate(pts)
        a = self.spectrum(pts, profile)
        b = self.spectrum(-pts, profile)
        ref = np.abs(a).max()
        return bool(np.abs(b - np.conj(a)).max() <= 1e-12 * max(ref, 1e-300))

    # -- serialization --------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"# bumpsum v1 ncomp={self.ncomp} terms={len(self.terms)}"]
        for t in self.terms:
            mag = "-inf" if t.amp.is_zero else repr(t.amp.log2mag)
            sign = "+" if math.cos(t.amp.phase) >= 0 else "-"
            syms = " | ".join(str(s) for s in t.symbols)
            cx, cy, cz = t.center
            lines.append(f"{cx!r} {cy!r} {cz!r} ; {sign} ; {mag} ; {t.amp.phase!r} ; {syms}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BumpSum":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0]
        if not head.startswith("# bumpsum v1"):
            raise ValueError("not a bumpsum record stream")
        ncomp = int(head.split("ncomp=")[1].split()[0])
        terms = []
        for ln in lines[1:]:
            center, _sign, mag, phase, syms = (part.strip() for part in ln.split(";"))
            c = tuple(float(x) for x in center.split())
            amp = ZERO if mag == "-inf" else LogValue(float(mag), float(phase))
            symbols = tuple(parse(s.strip()) for s in syms.split("|"))
            terms.append(make_term(c, amp, symbols))
        return cls(tuple(terms), ncomp)


def apply_multiplier(f: BumpSum, m) -> BumpSum:
    """Compose every term with a scalar multiplier (or per-component list)."""
    if isinstance(m, (list, tuple)):
        if len(m) != f.ncomp:
            raise ValueError("multiplier list must match component count")
        ms = [as_sym(x) for x in m]
    else:
        ms = [as_sym(m)] * f.ncomp
    terms = [make_term(t.center, t.amp, tuple(mi * s for mi, s in zip(ms, t.symbols))) for t in f.terms]
    return BumpSum(tuple(terms), f.ncomp)


def apply_matrix(f: BumpSum, rows) -> BumpSum:
    """Apply a matrix multiplier, rows[i][j] acting on component j."""
    terms = []
    for t in f.terms:
        syms = []
        for row in rows:
            acc = None
            for mij, s in zip(row, t.symbols):
                prod = as_sym(mij) * s
                acc = prod if acc is None else acc + prod
            syms.append(acc)
        terms.append(make_term(t.center, t.amp, tuple(syms)))
    return BumpSum(tuple(terms), len(rows))


# ---------------------------------------------------------------------------
# Time kernel
# ---------------------------------------------------------------------------

SERIES_SWITCH = 1e-6


def aa_kernel(t, xi2, eta2, mu):
    """int_0^t exp(-mu((t - tau) xi2 + tau eta2)) dtau, cancellation free.

    The integral is symmetric in (xi2, eta2), so with lo = min and
    d = |eta2 - xi2| >= 0 it equals exp(-mu t lo) * (1 - exp(-x)) / (mu d),
    x = mu t d; a three-term series replaces the quotient when x is tiny.
    """
    t, xi2, eta2, mu = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, xi2, eta2, mu)))
    lo = np.minimum(xi2, eta2)
    d = np.abs(eta2 - xi2)
    x = mu * t * d
    base = np.exp(-mu * t * lo)
    small = np.abs(x) < SERIES_SWITCH
    quot = np.empty_like(x)
    xs = x[small]
    quot[small] = t[small] * (1.0 - xs / 2.0 + xs * xs / 6.0)
    big = ~small
    quot[big] = -np.expm1(-x[big]) / (mu[big] * d[big])
    out = base * quot
    return out if out.ndim else float(out)


# F(x) = (1 - (1 + x) e^-x) / x^2 = sum_n (n + 1) (-x)^n / (n + 2)!
_DS_SERIES = np.array([(n + 1) / math.factorial(n + 2) for n in range(10)])


def aa_kernel_ds(t, xi2, eta2, mu):
    """Derivative of aa_kernel in eta2: -mu exp(-mu t xi2) int_0^t tau exp(-mu tau d) dtau."""
    t, xi2, eta2, mu = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, xi2, eta2, mu)))
    x = mu * t * (eta2 - xi2)
    small = np.abs(x) < 0.05
    F = np.empty_like(x)
    F[small] = np.polynomial.polynomial.polyval(-x[small], _DS_SERIES)
    xb = x[~small]
    F[~small] = (-np.expm1(-xb) - xb * np.exp(-xb)) / xb ** 2
    out = -mu * np.exp(-mu * t * xi2) * t * t * F
    return out if out.ndim else float(out)


def _aa_and_ds(t, xi2, eta2, mu):
    """aa_kernel and aa_kernel_ds together (scalar t and mu), sharing the work."""
    x = (mu * t) * (eta2 - xi2)
    base = t * np.exp(-mu * t * xi2)
    if np.abs(x).max() < 0.05:
        # E(x) = (1 - e^-x) / x and F(x) as Horner series
        E = 1.0 + x * (-0.5 + x * (1.0 / 6 + x * (-1.0 / 24 + x * (1.0 / 120 + x * (-1.0 / 720 + x * (1.0 / 5040 + x * (-1.0 / 40320)))))))
        F = np.polynomial.polynomial.polyval(-x, _DS_SERIES)
        return base * E, -mu * t * base * F
    return aa_kernel(t, xi2, eta2, mu), aa_kernel_ds(t, xi2, eta2, mu)


# ---------------------------------------------------------------------------
# Pair boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    """One summand of a box integrand: out(xi) * f_sym(xi - eta) * g_sym(eta)."""

    f_sym: Sym
    g_sym: Sym
    out_sym: Sym


@dataclass(frozen=True)
class PairBoxIntegrand:
    """Integrand over (xi, eta) produced by one pair of terms.

    value(xi, eta) = pref * f_amp * g_amp * sum_ch out(xi) f_sym(xi - eta) g_sym(eta)
                     * phi_hat(xi - eta - c_f) * phi_hat(eta - c_g) * K(t; xi, eta)
    with K the aa_kernel evaluated at decay rate |eta|^2 (heat on the g factor)
    or |eta|^2 + |xi - eta|^2 (heat on both factors).
    """

    c_f: tuple
    c_g: tuple
    amp: LogValue
    channels: tuple
    t: float
    mu: float
    rate: str = "g"
    tag: str = ""

    @property
    def shift(self) -> np.ndarray:
        return np.asarray(self.c_f) + np.asarray(self.c_g)

    @property
    def box(self):
        """Axis-aligned box enclosing the support in xi."""
        s = self.shift
        return s - 2 * BUMP_RADIUS, s + 2 * BUMP_RADIUS

    def evaluate(self, xi, eta, profile=None):
        """Pointwise integrand (log-scaled amplitude applied; float range)."""
        profile = profile or default_profile()
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        cf, cg = np.asarray(self.c_f), np.asarray(self.c_g)
        d = xi - eta
        env = profile.phi_hat_vec(d - cf) * profile.phi_hat_vec(eta - cg)
        rate = np.einsum("...i,...i->...", eta, eta)
        if self.rate == "fg":
            rate = rate + np.einsum("...i,...i->...", d, d)
        ker = aa_kernel(self.t, np.einsum("...i,...i->...", xi, xi), rate, self.mu)
        acc = 0
        for ch in self.channels:
            acc = acc + ch.out_sym(xi) * ch.f_sym(d) * ch.g_sym(eta)
        return self.amp.to_complex() * acc * env * ker


def _support_meets(shift, out_radius):
    return np.linalg.norm(shift) <= 2 * BUMP_RADIUS + out_radius


def duhamel_bilinear(a: BumpSum, u: BumpSum, mid_symbol, t: float, mu: float,
                     out_radius: float | None = None, prefactor=None, tag: str = "") -> list:
    """Boxes of mu int_0^t e^{mu Lap (t - tau)} M(D) (a * Lap e^{mu Lap tau} u) dtau.

    ``mid_symbol`` is a scalar symbol (scalar u) or a row of symbols, one per
    component of u, whose sum gives the requested output component.  Only
    boxes whose support meets the ball of radius ``out_radius`` about the
    origin are returned (all boxes when it is None).
    """
    if a.ncomp != 1:
        raise ValueError("coefficient field must be scalar")
    row = list(mid_symbol) if isinstance(mid_symbol, (list, tuple)) else [mid_symbol]
    if len(row) != u.ncomp:
        raise ValueError("mid_symbol row must match components of u")
    pref = LogValue.from_number(mu * INV_2PI3) if prefactor is None else prefactor
    lap = -(NORM ** 2)
    boxes = []
    for ta in a.terms:
        if ta.amp.is_zero:
            continue
        for tu in u.terms:
            if tu.amp.is_zero:
                continue
            shift = ta.c + tu.c
            if out_radius is not None and not _support_meets(shift, out_radius):
                continue
            chans = []
            for m, s in zip(row, tu.symbols):
                m = as_sym(m)
                if m.op == "const" and m.args[0] == 0:
                    continue
                chans.append(Channel(ta.symbols[0], s * lap, m))
            if chans:
                boxes.append(PairBoxIntegrand(ta.center, tu.center, pref * ta.amp * tu.amp,
                                              tuple(chans), float(t), float(mu), "g", tag))
    return boxes


def duhamel_convective(u: BumpSum, mid_row, t: float, mu: float, out_radius=None,
                       prefactor=None, tag: str = "") -> list:
    """Boxes of int_0^t e^{mu Lap (t - tau)} M(D) (U0 . grad U0) dtau, U0 = e^{mu Lap tau} u.

    Both factors carry their own heat decay, so the kernel rate is
    |eta|^2 + |xi - eta|^2.  ``mid_row`` maps components of U0.grad U0 to the
    output component.  The default prefactor is (2 pi)^-3.
    """
    pref = LogValue.from_number(INV_2PI3) if prefactor is None else prefactor
    from .symbols import X
    boxes = []
    for tf in u.terms:
        if tf.amp.is_zero:
            continue
        for tg in u.terms:
            if tg.amp.is_zero:
                continue
            shift = tf.c + tg.c
            if out_radius is not None and not _support_meets(shift, out_radius):
                continue
            chans = []
            for c, m in enumerate(mid_row):
                m = as_sym(m)
                if m.op == "const" and m.args[0] == 0:
                    continue
                for l in range(3):
                    # (U0^l)(xi - eta) * (i eta_l) U0^c(eta)
                    chans.append(Channel(tf.symbols[l], const(1j) * X(l + 1) * tg.symbols[c], m))
            if chans:
                boxes.append(PairBoxIntegrand(tf.center, tg.center, pref * tf.amp * tg.amp,
                                              tuple(chans), float(t), float(mu), "fg", tag))
    return boxes


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _leg(n):
    return np.polynomial.legendre.leggauss(n)


def gauss(n, a, b):
    x, w = _leg(n)
    return 0.5 * (b - a) * (x + 1) + a, 0.5 * (b - a) * w


def gauss_panels(breaks, counts):
    xs, ws = [], []
    for (a, b), n in zip(zip(breaks[:-1], breaks[1:]), counts):
        if b > a:
            x, w = gauss(n, a, b)
            xs.append(x)
            ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def sphere_rule(n_theta, n_psi, axis=0):
    """Gauss in cos(theta) about ``axis`` times trapezoid in azimuth; weights sum to 4 pi."""
    ct, wt = _leg(n_theta)
    ps = (np.arange(n_psi) + 0.5) * 2 * np.pi / n_psi
    st = np.sqrt(1 - ct ** 2)
    a = np.outer(ct, np.ones(n_psi))
    b = np.outer(st, np.cos(ps))
    c = np.outer(st, np.sin(ps))
    comps = [None, None, None]
    comps[axis] = a
    comps[(axis + 1) % 3] = b
    comps[(axis + 2) % 3] = c
    om = np.stack(comps, -1).reshape(-1, 3)
    w = np.outer(wt, np.full(n_psi, 2 * np.pi / n_psi)).ravel()
    return om, w


def probe_radial_rule(profile, n):
    """Gauss panels on the probe annulus split where phi changes formula."""
    sc = 2.0 ** -profile.probe_scale
    breaks = [0.75 * sc, (4.0 / 3.0) * sc, 1.5 * sc, (8.0 / 3.0) * sc]
    return gauss_panels(breaks, [n, max(2, n // 4), n])


@dataclass
class PairingResult:
    value: LogValue
    error: LogValue
    levels: int = 0
    boxes: int = 0
    per_box: list = field(default_factory=list)

    def to_float(self) -> float:
        return self.value.to_float()

    @property
    def abs_error(self) -> float:
        return self.error.to_float() if not self.error.is_zero else 0.0


def _channel_fast(ch: Channel, rate: str):
    """Return (f_const, quad) when the channel admits the collapsed angular rule."""
    if rate != "g" or not ch.f_sym.is_constant:
        return None
    quad = sphere_quadratic(ch.out_sym)
    if quad is None:
        return None
    f_const = complex(np.asarray(ch.f_sym(np.ones((1, 3))))[0])
    return f_const, quad


class _FastRule:
    """k-independent part of the collapsed quadrature for one (shift, out symbol, level)."""

    def __init__(self, profile: DyadicProfile, shift, quad, level: int):
        lo, hi = profile.probe_radii
        _, b, Q = quad
        r, wr = probe_radial_rule(profile, 8 * 2 ** level)
        n_r = len(r)
        wr = wr * r ** 2 * profile.probe(r)
        s = np.asarray(shift, dtype=float)
        smag = float(np.linalg.norm(s))
        grow = level + 1
        if smag == 0:
            breaks = [0.0, 1.0 - hi, 1.0 + hi, 2.0 - hi, 2.0 + hi]
            counts = [8 * grow, 4 * grow, 24 * grow, 4 * grow]
            n_th, n_ps = 8 + 4 * level, 8
        else:
            zmax = smag + BUMP_RADIUS + hi
            breaks = list(np.linspace(0, zmax, 5))
            counts = [12 * grow] * 4
            n_th, n_ps = 12 * grow, 12 * grow
        z, wz = gauss_panels(breaks, counts)
        om, wom = sphere_rule(n_th, n_ps, axis=0)
        # J_a(r, z) = 2 pi / (r z) int_{|z - r|}^{z + r} u^a phi_hat(s) s ds
        xs, ws = _leg(16)
        R = r[:, None, None]
        Z = z[None, :, None]
        sa = np.abs(Z - R)
        sb = Z + R
        sn = 0.5 * (sb - sa) * (xs[None, None, :] + 1) + sa
        sw = 0.5 * (sb - sa) * ws[None, None, :]
        u = (R ** 2 + Z ** 2 - sn ** 2) / (2 * R * Z)
        base = profile.phi_hat(sn) * sn * sw
        pref = 2 * np.pi / (R[..., 0] * Z[..., 0])
        J0 = pref * base.sum(-1)
        J1 = pref * (u * base).sum(-1)
        J2 = pref * (u * u * base).sum(-1)
        nQn = np.einsum("qi,ij,qj->q", om, Q, om)
        bn = om @ b
        trQ = np.trace(Q)
        # Avg(r, z, n) over the xi-sphere, then weighted for the zeta' rule
        avg = (J2[:, :, None] * nQn[None, None, :]
               + 0.5 * (J0 - J2)[:, :, None] * (trQ - nQn)[None, None, :]
               + J1[:, :, None] * bn[None, None, :])
        zeta = (z[:, None, None] * om[None, :, :]).reshape(-1, 3)
        wzeta = (wz[:, None] * z[:, None] ** 2 * wom[None, :]).ravel()
        g_side = profile.phi_hat_vec(zeta - s)
        self.weights = wr[:, None] * avg.reshape(n_r, -1) * (wzeta * g_side)[None, :]
        keep = np.abs(self.weights).max(axis=0) > 0
        self.weights = self.weights[:, keep]
        self.eta_rel = zeta[keep] - s  # eta - c_g
        self.xi2 = r ** 2


_FAST_CACHE: dict = {}


def _fast_rule(profile, shift, quad, level):
    key = (profile.table_hash(), profile.probe_scale, tuple(np.round(shift, 12)),
           repr(quad), level)
    rule = _FAST_CACHE.get(key)
    if rule is None:
        rule = _FastRule(profile, shift, quad, level)
        _FAST_CACHE[key] = rule
    return rule


def _scaled_g(sym: Sym, cg: np.ndarray, rel: np.ndarray):
    """g_sym(cg + rel) as (mantissa array, log2 scale) using homogeneity when known."""
    deg = sym.degree()
    cn = float(np.linalg.norm(cg))
    if deg is not None and cn > 1:
        lam = cn
        vals = sym((cg + rel) / lam)
        return np.asarray(vals), deg * math.log2(lam)
    return np.asarray(sym(cg + rel)), 0.0


def _fast_box_value(box: PairBoxIntegrand, profile, level):
    """Collapsed-rule value of a box as (mantissa, log2 scale)."""
    cg = np.asarray(box.c_g, dtype=float)
    total = 0j
    scale_ref = None
    parts = []
    for ch in box.channels:
        f_const, quad = _channel_fast(ch, box.rate)
        rule = _fast_rule(profile, box.shift, quad, level)
        gvals, glog = _scaled_g(ch.g_sym, cg, rule.eta_rel)
        eta = cg + rule.eta_rel
        eta2 = np.einsum("ij,ij->i", eta, eta)
        ker = aa_kernel(box.t, rule.xi2[:, None], eta2[None, :], box.mu)
        val = np.sum(rule.weights * ker * gvals[None, :]) * f_const
        parts.append((val, glog))
    scale_ref = max(p[1] for p in parts)
    for val, glog in parts:
        total += val * 2.0 ** (glog - scale_ref)
    return total, scale_ref


def _monomial_exponents(deg):
    return [(i, j, k) for n in range(deg + 1) for i in range(n + 1)
            for j in range(n + 1 - i) for k in [n - i - j]]


def _monomials(x, exps):
    return np.stack([x[:, 0] ** i * x[:, 1] ** j * x[:, 2] ** k for i, j, k in exps], axis=-1)


_MOMENT_CACHE: dict = {}


def _probe_moments(profile, out_sym, deg):
    """int phi(2^m xi) out(xi) (xi / rho)^alpha dxi for all |alpha| <= deg."""
    key = (profile.table_hash(), profile.probe_scale, str(out_sym), deg)
    if key not in _MOMENT_CACHE:
        _MOMENT_CACHE[key] = _probe_moments_uncached(profile, out_sym, deg)
    return _MOMENT_CACHE[key]


def _probe_moments_uncached(profile, out_sym, deg):
    lo, hi = profile.probe_radii
    r, wr = probe_radial_rule(profile, 24)
    wr = wr * r ** 2 * profile.probe(r)
    om, wom = sphere_rule(deg + 12, 2 * deg + 24, axis=2)
    xi = (r[:, None, None] * om[None]).reshape(-1, 3)
    w = (wr[:, None] * wom[None]).ravel() * np.asarray(out_sym(xi))
    return _monomials(xi / hi, _monomial_exponents(deg)).T @ w


def _generic_box_value(box: PairBoxIntegrand, profile, level):
    """Inner eta-integral sampled at a few xi, fitted by a polynomial, then paired.

    The probe ball has radius ~2^-m while the inner integral varies on the
    unit scale of the bumps, so a degree-d fit is accurate to about
    (2^-m)^(d+1); the singular outer symbol is integrated exactly against
    the fitted monomials.
    """
    lo, hi = profile.probe_radii
    deg = 2 + level
    exps = _monomial_exponents(deg)
    nr = deg // 2 + 2
    rs, _ = gauss(nr, 0.0, hi)
    om, _ = sphere_rule(deg + 1, 2 * deg + 2, axis=2)
    pts = np.concatenate([np.zeros((1, 3)), (rs[:, None, None] * om[None]).reshape(-1, 3)])
    s = box.shift
    smag = float(np.linalg.norm(s))
    grow = level + 1
    if smag == 0:
        breaks = [0.0, 1.0 - hi, 1.0 + hi, 2.0 - hi, 2.0 + hi]
        counts = [8 * grow, 4 * grow, 24 * grow, 4 * grow]
        n_th, n_ps = 8 + 4 * level, 16 + 8 * level
    else:
        breaks = list(np.linspace(0, smag + BUMP_RADIUS + hi, 5))
        counts = [12 * grow] * 4
        n_th, n_ps = 12 * grow, 24 * grow
    z, wz = gauss_panels(breaks, counts)
    zom, wzom = sphere_rule(n_th, n_ps, axis=0)
    zeta = (z[:, None, None] * zom[None]).reshape(-1, 3)
    wzeta = (wz[:, None] * z[:, None] ** 2 * wzom[None]).ravel()
    gside = profile.phi_hat_vec(zeta - s)
    keep = gside > 0
    zeta, wzeta = zeta[keep], wzeta[keep] * gside[keep]
    cg = np.asarray(box.c_g, dtype=float)
    cf = np.asarray(box.c_f, dtype=float)
    eta = cg + zeta - s
    eta2 = np.einsum("ij,ij->i", eta, eta)
    lam = max(float(np.linalg.norm(cg)), float(np.linalg.norm(cf)), 1.0)
    degs = []
    for ch in box.channels:
        df, dg = ch.f_sym.degree(), ch.g_sym.degree()
        degs.append(None if df is None or dg is None else df + dg)
    homog = all(d is not None for d in degs)
    if not homog:
        lam = 1.0
    g_vals = [np.asarray(ch.g_sym(eta / lam)) for ch in box.channels]
    inner = np.zeros((len(box.channels), len(pts)), dtype=complex)
    for i, X in enumerate(pts):
        D = X - zeta
        env = profile.phi_hat_vec(D) * wzeta
        dvec = D + cf
        rate = eta2
        if box.rate == "fg":
            rate = eta2 + np.einsum("ai,ai->a", dvec, dvec)
        ker = aa_kernel(box.t, float(X @ X), rate, box.mu)
        base = env * ker
        for c, ch in enumerate(box.channels):
            inner[c, i] = np.sum(np.asarray(ch.f_sym(dvec / lam)) * g_vals[c] * base)
    V = _monomials(pts / hi, exps)
    total = 0j
    for c, (ch, d) in enumerate(zip(box.channels, degs)):
        coef, *_ = np.linalg.lstsq(V, inner[c], rcond=None)
        part = coef @ _probe_moments(profile, ch.out_sym, deg)
        total += part * (lam ** (d - degs[0]) if homog else 1.0)
    scale = degs[0] * math.log2(lam) if homog else 0.0
    return total, scale


def _reflect1(x):
    y = np.array(x, dtype=float, copy=True)
    y[..., 0] *= -1
    return y


def channel_is_reflection_odd(box: PairBoxIntegrand, ch: Channel) -> bool:
    """True when the xi_1 reflection makes the channel's leading part cancel.

    Needs a constant f symbol, heat on the g factor only, a box centred on
    the plane xi_1 = 0 and an output symbol odd under xi_1 -> -xi_1.  The
    pairing of such a channel then only sees the reflection-odd part of its
    g side, which ``_odd_box_value`` forms without cancellation.
    """
    if box.rate != "g" or not ch.f_sym.is_constant or ch.g_sym.has_heat:
        return False
    scale = max(float(np.linalg.norm(box.c_g)), 1.0)
    if abs(box.shift[0]) > 1e-12 * scale:
        return False
    om = np.random.default_rng(7).normal(size=(16, 3))
    a = np.asarray(ch.out_sym(om), dtype=complex)
    b = np.asarray(ch.out_sym(_reflect1(om)), dtype=complex)
    return bool(np.abs(a + b).max() <= 1e-12 * max(np.abs(a).max(), 1e-300))


def _odd_box_value(box: PairBoxIntegrand, profile, level, deg=None, grow=None):
    """Single-channel box with a reflection-odd output symbol.

    With zeta = eta - c_g the pair (xi, zeta) -> (S xi, S zeta), S the xi_1
    reflection, leaves the bumps, the probe and |xi|^2 fixed and flips the
    output symbol, so only D = (G(zeta) - G(S zeta)) / 2 survives, where
    G = g(c_g + zeta) A(t, |xi|^2, |c_g + zeta|^2).  D is written as the
    integral of zeta_1 d_1 G along the segment joining S zeta to zeta, which
    is free of the cancellation that swamps a direct evaluation when
    |c_g| is huge.  The xi-dependence is then fitted and paired exactly as
    in ``_generic_box_value``.
    """
    (ch,) = box.channels
    lo, hi = profile.probe_radii
    deg = 2 + 2 * level if deg is None else deg
    exps = _monomial_exponents(deg)
    nr = deg // 2 + 2
    rs, _ = gauss(nr, 0.0, hi)
    om, _ = sphere_rule(deg + 1, 2 * deg + 2, axis=2)
    pts = np.concatenate([np.zeros((1, 3)), (rs[:, None, None] * om[None]).reshape(-1, 3)])
    s = box.shift
    grow = level + 1 if grow is None else grow
    z, wz = gauss_panels([0.0, 1.0 - hi, 1.0 + hi, 2.0 - hi, 2.0 + hi], [8 * grow, 4 * grow, 24 * grow, 4 * grow])
    zom, wzom = sphere_rule(4 + 4 * grow, 8 + 8 * grow, axis=0)
    zeta = (z[:, None, None] * zom[None]).reshape(-1, 3)
    wzeta = (wz[:, None] * z[:, None] ** 2 * wzom[None]).ravel() * profile.phi_hat_vec(zeta)
    cg = np.asarray(box.c_g, dtype=float)
    f_const = complex(np.asarray(ch.f_sym(np.ones((1, 3))))[0])
    g1 = ch.g_sym.diff(1)
    lam_x, lam_w = gauss(4 + 2 * level, -1.0, 1.0)
    # path points eta(lam) = c_g + (lam zeta_1, zeta_2, zeta_3)
    paths = []
    for lx, lw in zip(lam_x, lam_w):
        eta = cg + zeta * np.array([lx, 1.0, 1.0])
        eta2 = np.einsum("ij,ij->i", eta, eta)
        paths.append((lw, eta2, np.asarray(g1(eta)), np.asarray(ch.g_sym(eta)) * 2 * eta[:, 0]))
    inner = np.zeros(len(pts), dtype=complex)
    for i, Xp in enumerate(pts):
        env = profile.phi_hat_vec(Xp - zeta - s) * wzeta
        x2 = float(Xp @ Xp)
        dG = 0
        for lw, eta2, gd, gs in paths:
            dG = dG + lw * (gd * aa_kernel(box.t, x2, eta2, box.mu) + gs * aa_kernel_ds(box.t, x2, eta2, box.mu))
        inner[i] = np.sum(env * 0.5 * zeta[:, 0] * dG) * f_const
    V = _monomials(pts / hi, exps)
    coef, *_ = np.linalg.lstsq(V, inner, rcond=None)
    return coef @ _probe_moments(profile, ch.out_sym, deg), 0.0


def _odd_fast_box_value(box: PairBoxIntegrand, profile, level):
    """Collapsed-rule version of ``_odd_box_value`` for sphere-quadratic outputs."""
    (ch,) = box.channels
    f_const, quad = _channel_fast(ch, box.rate)
    rule = _fast_rule(profile, box.shift, quad, level)
    cg = np.asarray(box.c_g, dtype=float)
    zeta = rule.eta_rel
    g1 = ch.g_sym.diff(1)
    lam_x, lam_w = gauss(4 + level, -1.0, 1.0)
    dG = 0
    for lx, lw in zip(lam_x, lam_w):
        eta = cg + zeta * np.array([lx, 1.0, 1.0])
        eta2 = np.einsum("ij,ij->i", eta, eta)
        gd = np.asarray(g1(eta))[None, :]
        gs = (np.asarray(ch.g_sym(eta)) * 2 * eta[:, 0])[None, :]
        A, As = _aa_and_ds(box.t, rule.xi2[:, None], eta2[None, :], box.mu)
        dG = dG + lw * (gd * A + gs * As)
    return np.sum(rule.weights * dG * (0.5 * zeta[:, 0])[None, :]) * f_const, 0.0


def box_is_fast(box: PairBoxIntegrand) -> bool:
    return all(_channel_fast(ch, box.rate) is not None for ch in box.channels)


def _box_value(box, profile, level, method):
    if method == "fast":
        return _fast_box_value(box, profile, level)
    if method == "odd":
        if _channel_fast(box.channels[0], box.rate) is not None:
            return _odd_fast_box_value(box, profile, level)
        return _odd_box_value(box, profile, level)
    return _generic_box_value(box, profile, level)


def _split_channels(box: PairBoxIntegrand, method: str):
    """Sub-boxes with the evaluation method of each; odd channels go alone."""
    if method != "auto":
        return [(box, method)]
    odd = [ch for ch in box.channels if channel_is_reflection_odd(box, ch)]
    rest = tuple(ch for ch in box.channels if ch not in odd)
    out = [(replace(box, channels=(ch,)), "odd") for ch in odd]
    if rest:
        sub = replace(box, channels=rest)
        out.append((sub, "fast" if box_is_fast(sub) else "generic"))
    return out


def box_disjoint_from_probe(box: PairBoxIntegrand, profile) -> bool:
    lo, hi = profile.probe_radii
    return np.linalg.norm(box.shift) > 2 * BUMP_RADIUS + hi


@dataclass
class _SubBox:
    box: PairBoxIntegrand
    how: str
    top: int
    index: int
    level: int = -1
    mant: complex = 0j
    scale: float = 0.0
    diff: float = float("inf")
    history: list = field(default_factory=list)

    def advance(self, profile):
        self.level += 1
        mant, scale = _box_value(self.box, profile, self.level, self.how)
        if self.level > 0:
            self.diff = abs(mant * 2.0 ** (scale - self.scale) - self.mant) * 2.0 ** (self.scale - scale)
        self.mant, self.scale = mant, scale
        self.history.append(mant)

    def value(self):
        return from_scaled(self.mant, self.scale) * self.box.amp

    def error(self):
        if not math.isfinite(self.diff):
            return None
        return from_scaled(self.diff, self.scale) * abs(self.box.amp)


def pairing(boxes: Sequence[PairBoxIntegrand], probe: DyadicProfile | None = None,
            rtol: float = 1e-8, atol_rel: float = 0.0, max_level: int | None = None,
            method: str = "auto", strategy: str = "global", atol: LogValue | None = None) -> PairingResult:
    """int phi(2^m xi) [sum of box integrands](xi, eta) dxi deta.

    Every box (split by channel where the evaluation method differs) is
    computed at two successive refinement levels; the difference is its
    error estimate.  With ``strategy="global"`` the box with the largest
    error is refined until the summed error is at most ``rtol`` times the
    total (or ``atol_rel`` times the sum of box magnitudes, for totals that
    cancel, or the absolute ``atol`` for totals that vanish by symmetry).
    ``strategy="local"`` instead holds every box to ``rtol``.
    """
    profile = probe or default_profile()
    if not boxes:
        return PairingResult(ZERO, ZERO)
    subs, skipped = [], set()
    for i, box in enumerate(boxes):
        if box.amp.is_zero or box.t == 0 or box_disjoint_from_probe(box, profile):
            skipped.add(i)
            continue
        for sub, how in _split_channels(box, method):
            top = max_level if max_level is not None else (4 if how == "fast" else 3)
            subs.append(_SubBox(sub, how, top, i))
    for sb in subs:
        sb.advance(profile)
        if sb.top > 0:
            sb.advance(profile)

    def fail(sb):
        raise QuadratureError(
            f"box {sb.box.tag or sb.box.shift} did not converge (rtol={rtol})",
            {"history": sb.history, "method": sb.how,
             "relative_change": sb.diff / max(abs(sb.mant), 1e-300)})

    def budget(val, mag):
        """log2 of the allowed absolute error."""
        out = -math.inf
        if rtol > 0 and not val.is_zero:
            out = math.log2(rtol) + val.log2mag
        if atol_rel > 0 and not mag.is_zero:
            out = max(out, math.log2(atol_rel) + mag.log2mag)
        if atol is not None and not atol.is_zero:
            out = max(out, atol.log2mag)
        return out

    if strategy == "local":
        for sb in subs:
            while True:
                e = sb.error()
                if e is not None and (e.is_zero or e.log2mag <= budget(sb.value(), abs(sb.value()))
                                      or sb.mant == 0):
                    break
                if sb.level >= sb.top:
                    fail(sb)
                sb.advance(profile)
    else:
        while subs:
            errs = [sb.error() for sb in subs]
            if any(e is None for e in errs):
                fail(subs[[e is None for e in errs].index(True)])
            total = log_sum([sb.value() for sb in subs])
            mag = log_sum([abs(sb.value()) for sb in subs])
            err = log_sum(errs)
            room = budget(total, mag)
            if err.is_zero or mag.is_zero or err.log2mag <= room:
                break
            stuck = [j for j in range(len(subs)) if subs[j].level >= subs[j].top]
            stuck_err = log_sum([errs[j] for j in stuck])
            if not stuck_err.is_zero and stuck_err.log2mag > room:
                fail(subs[max(stuck, key=lambda j: errs[j].log2mag)])
            free = [j for j in range(len(subs)) if subs[j].level < subs[j].top]
            subs[max(free, key=lambda j: errs[j].log2mag)].advance(profile)
    values, errors, per_box = [], [], []
    by_box = {}
    for sb in subs:
        by_box.setdefault(sb.index, []).append(sb)
    for i, box in enumerate(boxes):
        if i in skipped or i not in by_box:
            per_box.append((box.tag, ZERO, ZERO))
            continue
        v = log_sum([sb.value() for sb in by_box[i]])
        e = log_sum([abs(sb.error()) for sb in by_box[i]])
        values.append(v)
        errors.append(e)
        per_box.append((box.tag, v, e))
    levels = max((sb.level for sb in subs), default=0)
    return PairingResult(log_sum(values), log_sum(errors), levels, len(boxes), per_box)


# ---------------------------------------------------------------------------
# Block envelopes and L^p norms
# ---------------------------------------------------------------------------

@dataclass
class EnvelopeNorm:
    log2_value: float
    is_bound: bool = False
    method: str = "coherent"
    refinement_change: float | None = None

    @property
    def value(self) -> float:
        return 0.0 if self.log2_value == -math.inf else 2.0 ** self.log2_value


def terms_in_block(f: BumpSum, j: int):
    lo, hi = 0.75 * 2.0 ** j, (8.0 / 3.0) * 2.0 ** j
    out = []
    for t in f.terms:
        cn = float(np.linalg.norm(t.c))
        if cn + BUMP_RADIUS > lo and cn - BUMP_RADIUS < hi and not t.amp.is_zero:
            out.append(t)
    return out


def block_range(f: BumpSum):
    norms = [float(np.linalg.norm(t.c)) for t in f.terms if not t.amp.is_zero]
    if not norms:
        return range(0)
    rmin = max(min(norms) - BUMP_RADIUS, 1e-3)
    rmax = max(norms) + BUMP_RADIUS
    return range(int(math.floor(math.log2(rmin / (8 / 3)))), int(math.ceil(math.log2(rmax / 0.75))) + 1)


def _common_step(offsets, tol=1e-9):
    """Vector g and integers n_m with offsets[m] = n_m g, or None."""
    nz = [o for o in offsets if np.linalg.norm(o) > 0]
    if not nz:
        return None
    base = min(nz, key=np.linalg.norm)
    e = base / np.linalg.norm(base)
    for o in nz:
        if np.linalg.norm(o - (o @ e) * e) > tol * max(1.0, np.linalg.norm(o)):
            return None
    lam = np.array([o @ e for o in offsets])
    step = float(np.linalg.norm(base))
    for den in range(1, 7):
        g = step / den
        n = lam / g
        if np.allclose(n, np.round(n), atol=1e-7):
            return g * e, np.round(n).astype(int)
    return None


def _cluster(terms, near):
    clusters = []
    for t in terms:
        for cl in clusters:
            if any(np.linalg.norm(t.c - u.c) <= near for u in cl):
                cl.append(t)
                break
        else:
            clusters.append([t])
    return clusters


def envelope_lp_norm(f: BumpSum, j: int, p: float, profile: DyadicProfile | None = None,
                     period: float = 16 * math.pi, min_separation: float = 16.0,
                     check_refinement: bool = False) -> EnvelopeNorm:
    """L^p norm of |Delta_j f| from demodulated envelopes.

    Terms whose centers are close share one envelope grid.  Groups whose
    centers differ by integer multiples of a common vector at least
    ``min_separation`` long are combined by averaging over the fast relative
    phase, which is exact in the limit of large separation (and exact for
    p = 2 once the separation exceeds twice the envelope bandwidth).  Any
    other layout falls back to the triangle inequality and is labelled a bound.
    """
    profile = profile or default_profile()
    terms = terms_in_block(f, j)
    if not terms:
        return EnvelopeNorm(-math.inf)
    for t in terms:
        if t.quadrature_only:
            raise SupportError("block contains a singular symbol over a support holding 0")
    ref_log = max(t.amp.log2mag for t in terms)
    clusters = _cluster(terms, near=2 * BUMP_RADIUS + 4.0)
    val = _envelope_norm(clusters, j, p, profile, period, min_separation, ref_log, refine=1)
    change = None
    if check_refinement and np.isinf(p):
        val2 = _envelope_norm(clusters, j, p, profile, period, min_separation, ref_log, refine=2)
        change = abs(val2[0] - val[0]) / max(val2[0], 1e-300)
    log2v = math.log2(val[0]) + ref_log if val[0] > 0 else -math.inf
    return EnvelopeNorm(log2v, val[1], val[2], change)


def _envelope_grid(cluster, j, profile, period, ref_log, ncomp, refine):
    c0 = cluster[0].c
    spread = max(float(np.linalg.norm(t.c - c0)) for t in cluster)
    bw = BUMP_RADIUS + spread
    h = 2 * math.pi / period
    M = int(2 * math.ceil(bw / h) + 2) * refine
    M += M % 2
    n = np.fft.fftfreq(M, d=1.0 / M)
    k = n * h
    Z = np.stack(np.meshgrid(k, k, k, indexing="ij"), -1)
    E = np.zeros((ncomp, M, M, M), dtype=complex)
    for t in cluster:
        xi = Z + t.c
        rel = Z + (t.c - c0)
        bump = profile.phi_hat_vec(rel - (t.c - c0))
        mask = bump > 0
        w = np.zeros(Z.shape[:-1])
        w[mask] = bump[mask] * profile.block_weight(np.linalg.norm(xi[mask], axis=-1), j)
        amp = t.amp.mantissa(ref_log)
        for i, sym in enumerate(t.symbols):
            vals = np.zeros(Z.shape[:-1], dtype=complex)
            vals[mask] = sym(xi[mask])
            # shift the spectrum so the cluster shares the demodulation frequency c0
            E[i] += _place(amp * vals * w, t.c - c0, h)
    field = np.fft.ifftn(E, axes=(1, 2, 3)) * (M ** 3 / period ** 3)
    return field, (period / M) ** 3


def _place(arr, offset, h):
    shift = np.round(offset / h).astype(int)
    if not np.allclose(shift * h, offset, atol=1e-9):
        raise SupportError("cluster offsets must be lattice vectors of the envelope grid")
    return np.roll(arr, tuple(shift), axis=(0, 1, 2))


def _envelope_norm(clusters, j, p, profile, period, min_sep, ref_log, refine):
    ncomp = len(clusters[0][0].symbols)
    if len(clusters) == 1:
        # a single cluster: coherent synthesis; grid must hold the whole spread
        field, dv = _envelope_grid(clusters[0], j, profile, period, ref_log, ncomp, refine)
        mod = np.sqrt(np.sum(np.abs(field) ** 2, axis=0))
        return _lp(mod, p, dv), False, "coherent"
    offsets = [cl[0].c - clusters[0][0].c for cl in clusters]
    step = _common_step(offsets)
    grids = [_envelope_grid(cl, j, profile, period, ref_log, ncomp, refine) for cl in clusters]
    if step is None or np.linalg.norm(step[0]) < min_sep:
        total = sum(_lp(np.sqrt(np.sum(np.abs(g) ** 2, axis=0)), p, dv) for g, dv in grids)
        return total, True, "triangle"
    g, nvec = step
    # all cluster grids share M only if spreads agree; resample onto the largest
    Mmax = max(gr[0].shape[1] for gr in grids)
    fields = [_resample(gr[0], Mmax) for gr in grids]
    dv = (period / Mmax) ** 3
    spread = int(nvec.max() - nvec.min())
    if np.isinf(p):
        Q = 512
    elif float(p).is_integer() and int(p) % 2 == 0:
        Q = int(p) * spread + 1
    else:
        Q = max(64, int(8 * spread * max(p, 1)))
    acc = None
    for q in range(Q):
        th = 2 * math.pi * q / Q
        tot = sum(np.exp(1j * n * th) * fl for n, fl in zip(nvec, fields))
        mod = np.sqrt(np.sum(np.abs(tot) ** 2, axis=0))
        if np.isinf(p):
            cur = mod.max()
            acc = cur if acc is None else max(acc, cur)
        else:
            cur = mod ** p
            acc = cur if acc is None else acc + cur
    if np.isinf(p):
        return acc, False, "phase-averaged"
    return (np.sum(acc) / Q * dv) ** (1.0 / p), False, "phase-averaged"


def _resample(field, M):
    m = field.shape[1]
    if m == M:
        return field
    spec = np.fft.fftn(field, axes=(1, 2, 3))
    out = np.zeros((field.shape[0], M, M, M), dtype=complex)
    idx = np.fft.fftfreq(m, d=1.0 / m).astype(int)
    ix = np.ix_(idx % M, idx % M, idx % M)
    for c in range(field.shape[0]):
        out[c][ix] = spec[c]
    return np.fft.ifftn(out, axes=(1, 2, 3)) * (M ** 3 / m ** 3)


def _lp(mod, p, dv):
    if np.isinf(p):
        return float(mod.max())
    return float((np.sum(mod ** p) * dv) ** (1.0 / p))


# ---------------------------------------------------------------------------
# Periodic synthesis
# ---------------------------------------------------------------------------

def lattice(M: int, L: float):
    """Wavenumbers 2 pi n / L in FFT order."""
    return 2 * math.pi * np.fft.fftfreq(M, d=1.0 / M) / L


def synthesize_grid(f: BumpSum, M: int, L: float, profile=None):
    """Periodization of f on [0, L)^3 sampled on M^3 points.

    The lattice coefficients are samples of f_hat, so by Poisson summation
    the result is exactly sum_m f(x + m L) (up to band limitation by M).
    Returns the complex samples, shape (ncomp, M, M, M).
    """
    profile = profile or default_profile()
    k = lattice(M, L)
    kmax = np.abs(k).max()
    for t in f.terms:
        if np.abs(t.c).max() + BUMP_RADIUS > kmax:
            raise SupportError("bump support exceeds the grid band limit")
    K = np.stack(np.meshgrid(k, k, k, indexing="ij"), -1)
    spec = np.zeros((f.ncomp, M, M, M), dtype=complex)
    for t in f.terms:
        rel = K - t.c
        box = np.all(np.abs(rel) <= BUMP_RADIUS, axis=-1)
        if not box.any():
            continue
        sub = K[box]
        bump = profile.phi_hat_vec(sub - t.c)
        amp = t.amp.to_complex()
        for i, sym in enumerate(t.symbols):
            vals = np.zeros(len(sub), dtype=complex)
            nz = bump > 0
            vals[nz] = sym(sub[nz])
            spec[i][box] += amp * vals * bump
    return np.fft.ifftn(spec, axes=(1, 2, 3)) * (M ** 3 / L ** 3)
