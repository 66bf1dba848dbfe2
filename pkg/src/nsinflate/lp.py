"""Littlewood-Paley blocks, Besov and Chemin-Lerner norms, Bony paraproducts.

Grid fields live on a periodic box; the frequency lattice is 2 pi n / L per
axis.  Dilating a grid field by 2^m keeps the samples and divides the
period, so block indices shift by exactly m.  Bump fields (``BumpSum``) are
routed to the envelope norms in ``bump``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .profile import DyadicProfile, default_profile

TRUNCATION = 1e-14


class BesovDivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BesovIndex:
    s: float
    p: float
    r: float

    def __post_init__(self):
        for name in ("p", "r"):
            v = getattr(self, name)
            if not (v >= 1 or math.isinf(v)):
                raise ValueError(f"{name} must lie in [1, inf]")


@dataclass(frozen=True)
class GridField:
    """Real samples (ncomp, M1, M2, M3) on a box with the given periods."""

    data: np.ndarray
    period: tuple = (2 * math.pi,) * 3
    div_free: bool = False

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 3:
            d = d[None]
        if d.ndim != 4:
            raise ValueError("grid data must have shape (ncomp, M1, M2, M3)")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "period", tuple(float(x) for x in self.period))

    @property
    def ncomp(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def cell_volume(self):
        return float(np.prod([L / M for L, M in zip(self.period, self.shape)]))

    def wavenumbers(self):
        return [2 * math.pi * np.fft.fftfreq(M, d=1.0 / M) / L for M, L in zip(self.shape, self.period)]

    def kmod(self):
        k1, k2, k3 = self.wavenumbers()
        return np.sqrt(k1[:, None, None] ** 2 + k2[None, :, None] ** 2 + k3[None, None, :] ** 2)

    def spectrum(self):
        return np.fft.fftn(self.data, axes=(1, 2, 3))

    @classmethod
    def from_spectrum(cls, spec, period, div_free=False):
        return cls(np.fft.ifftn(spec, axes=(1, 2, 3)).real, period, div_free)

    def dilate(self, m: int) -> "GridField":
        """x -> f(2^m x)."""
        return GridField(self.data, tuple(L * 2.0 ** -m for L in self.period), self.div_free)

    def scaled(self, c) -> "GridField":
        return GridField(self.data * c, self.period, self.div_free)

    def modulus(self):
        return np.sqrt(np.sum(self.data ** 2, axis=0))

    def __add__(self, other):
        return GridField(self.data + other.data, self.period)

    def __sub__(self, other):
        return GridField(self.data - other.data, self.period)

    def __mul__(self, other):
        """Pointwise product (scalar times scalar or scalar times vector)."""
        if isinstance(other, GridField):
            return GridField(self.data * other.data, self.period)
        return self.scaled(other)


def multiply_spectrum(f: GridField, mult) -> GridField:
    return GridField.from_spectrum(f.spectrum() * mult[None], f.period, f.div_free)


def dyadic_block(f, j: int, profile: DyadicProfile | None = None):
    """Delta_j f = phi(2^-j D) f for grid fields; a filtered view for bump fields."""
    profile = profile or default_profile()
    if isinstance(f, GridField):
        return multiply_spectrum(f, profile.block_weight(f.kmod(), j))
    from .bump import BumpSum
    if isinstance(f, BumpSum):
        return BumpBlock(f, int(j), profile)
    raise TypeError("unsupported field type")


@dataclass(frozen=True)
class BumpBlock:
    base: object
    j: int
    profile: DyadicProfile

    def spectrum(self, xi, t=None):
        w = self.profile.block_weight(np.linalg.norm(np.asarray(xi, float), axis=-1), self.j)
        return self.base.spectrum(xi, self.profile, t) * w


def low_pass(f: GridField, j: int, profile=None) -> GridField:
    """S_j f = sum of blocks j' <= j - 1 plus the mean."""
    profile = profile or default_profile()
    k = f.kmod()
    w = np.where(k == 0, 1.0, profile.chi(np.ldexp(k, -j)))
    # chi(2^-j k) equals the telescoped sum of phi(2^-j' k) over j' <= j - 1
    return multiply_spectrum(f, w)


def block_indices(f: GridField):
    k = f.kmod()
    nz = k[k > 0]
    if nz.size == 0:
        return range(0)
    lo = int(math.floor(math.log2(nz.min() / (8.0 / 3.0))))
    hi = int(math.ceil(math.log2(nz.max() / 0.75)))
    return range(lo, hi + 1)


def lp_norm(f: GridField, p: float) -> float:
    mod = f.modulus()
    if math.isinf(p):
        return float(mod.max())
    return float((np.sum(mod ** p) * f.cell_volume) ** (1.0 / p))


def sup_refinement_change(f: GridField) -> float:
    """Relative change of the grid max when the grid is doubled by spectral zero padding."""
    fine = refine(f, 2)
    a, b = lp_norm(f, math.inf), lp_norm(fine, math.inf)
    return abs(b - a) / max(b, 1e-300)


def refine(f: GridField, factor: int) -> GridField:
    spec = f.spectrum()
    shape = f.shape
    new = tuple(m * factor if m > 1 else 1 for m in shape)
    out = np.zeros((f.ncomp,) + new, dtype=complex)
    idx = [np.fft.fftfreq(m, d=1.0 / m).astype(int) for m in shape]
    ix = np.ix_(*[i % n for i, n in zip(idx, new)])
    for c in range(f.ncomp):
        out[c][ix] = spec[c]
    # Nyquist modes are kept on one side only; acceptable for band-limited inputs
    scale = np.prod(new) / np.prod(shape)
    return GridField(np.fft.ifftn(out, axes=(1, 2, 3)).real * scale, f.period, f.div_free)


@dataclass
class BesovResult:
    value: float
    blocks: dict = field(default_factory=dict)
    floor: float = 0.0
    converged: bool = True
    is_bound: bool = False
    log2_value: float | None = None


def _combine(summands: dict, r: float):
    vals = np.array(list(summands.values()), dtype=float)
    if vals.size == 0:
        return 0.0
    if math.isinf(r):
        return float(vals.max())
    return float(np.sum(vals ** r) ** (1.0 / r))


def besov_norm(f, idx: BesovIndex, profile=None, strict=False, **kw) -> BesovResult:
    """(sum_j 2^{s r j} ||Delta_j f||_p^r)^(1/r), sup when r is infinite."""
    profile = profile or default_profile()
    from .bump import BumpSum
    if isinstance(f, BumpSum):
        return _besov_bump(f, idx, profile, **kw)
    summands = {}
    for j in block_indices(f):
        blk = dyadic_block(f, j, profile)
        summands[j] = 2.0 ** (idx.s * j) * lp_norm(blk, idx.p)
    return _finish(summands, idx.r, strict)


def _finish(summands, r, strict, is_bound=False):
    if not summands:
        return BesovResult(0.0, {}, 0.0, True, is_bound, -math.inf)
    peak = max(summands.values())
    floor = TRUNCATION * peak
    kept = {j: v for j, v in summands.items() if v >= floor}
    js = sorted(summands)
    # Cauchy check: the outermost blocks must be negligible against the total
    total = _combine(kept, r)
    edge = max(summands[js[0]], summands[js[-1]]) if len(js) > 2 else 0.0
    converged = edge <= 1e-6 * total or len(js) <= 2 or not np.isfinite(total)
    if not np.isfinite(total):
        converged = False
    if strict and not converged:
        raise BesovDivergenceError("block sum fails the Cauchy criterion at the truncation edge")
    return BesovResult(total, kept, floor, converged, is_bound,
                       math.log2(total) if total > 0 else -math.inf)


def _besov_bump(f, idx, profile, **kw):
    """Besov norm of a bump field in the log domain, blocks via envelope norms."""
    from .bump import block_range, envelope_lp_norm
    logs = {}
    bound = False
    for j in block_range(f):
        env = envelope_lp_norm(f, j, idx.p, profile, **kw)
        if env.log2_value == -math.inf:
            continue
        bound |= env.is_bound
        logs[j] = idx.s * j + env.log2_value
    if not logs:
        return BesovResult(0.0, {}, 0.0, True, bound, -math.inf)
    ref = max(logs.values())
    floor_log = ref + math.log2(TRUNCATION)
    kept = {j: v for j, v in logs.items() if v >= floor_log}
    rel = {j: 2.0 ** (v - ref) for j, v in kept.items()}
    total_rel = _combine(rel, idx.r)
    log2v = ref + math.log2(total_rel)
    value = 2.0 ** log2v if log2v < 1023 else math.inf
    return BesovResult(value, {j: 2.0 ** (v - ref) for j, v in kept.items()}, 2.0 ** floor_log if floor_log > -1074 else 0.0,
                       True, bound, log2v)


# ---------------------------------------------------------------------------
# Chemin-Lerner norms
# ---------------------------------------------------------------------------

@dataclass
class TimeSeriesNorm:
    """Per-step block norms: values[n, i] = ||Delta_{js[i]} f(n dt)||_p."""

    dt: float
    values: np.ndarray
    js: Sequence[int]

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.js = list(self.js)
        if self.values.shape[1] != len(self.js):
            raise ValueError("one column per block index")


@dataclass
class ChemLernerResult:
    value: float
    coarse_value: float | None
    flagged: bool


def _time_norm(v, dt, rho):
    if math.isinf(rho):
        return v.max(axis=0)
    if v.shape[0] == 1:
        return np.zeros(v.shape[1])
    w = np.full(v.shape[0], dt)
    w[0] = w[-1] = dt / 2
    return (w @ (v ** rho)) ** (1.0 / rho)


def chemin_lerner_norm(series: TimeSeriesNorm, idx: BesovIndex, rho: float) -> ChemLernerResult:
    """||f||_{L~^rho_T B^s_{p,r}}: L^rho in time (trapezoid) inside, weighted l^r over j outside."""
    def outer(v, dt):
        inner = _time_norm(v, dt, rho)
        summ = {j: 2.0 ** (idx.s * j) * x for j, x in zip(series.js, inner)}
        return _combine(summ, idx.r)

    full = outer(series.values, series.dt)
    coarse = None
    flagged = False
    n = series.values.shape[0]
    if not math.isinf(rho) and n >= 5 and (n - 1) % 2 == 0:
        coarse = outer(series.values[::2], 2 * series.dt)
        flagged = abs(coarse - full) > 0.05 * max(full, 1e-300)
    return ChemLernerResult(full, coarse, flagged)


# ---------------------------------------------------------------------------
# Inequality spot checks
# ---------------------------------------------------------------------------

def derivative(f: GridField, gamma) -> GridField:
    k = f.wavenumbers()
    mult = np.ones(f.shape, dtype=complex)
    for axis, (g, ka) in enumerate(zip(gamma, k)):
        if g:
            shape = [1, 1, 1]
            shape[axis] = -1
            mult = mult * (1j * ka.reshape(shape)) ** g
    return GridField.from_spectrum(f.spectrum() * mult[None], f.period)


def bernstein_check(f: GridField, j: int, gamma, p: float, q: float) -> float:
    """||d^gamma f||_q / (2^{j|gamma| + j(3/p - 3/q)} ||f||_p)."""
    order = sum(gamma)
    inv = (0 if math.isinf(p) else 3.0 / p) - (0 if math.isinf(q) else 3.0 / q)
    num = lp_norm(derivative(f, gamma), q)
    den = 2.0 ** (j * order + j * inv) * lp_norm(f, p)
    return num / den


def random_annulus_field(j: int, M: int = 32, cells: float = 8.0, seed: int = 0, ncomp: int = 1) -> GridField:
    """Random real field with spectrum in the block-j annulus.

    The period is cells * 2pi * 2^-j, so the lattice resolves the annulus
    with the same number of modes at every j.
    """
    rng = np.random.default_rng(seed)
    L = cells * 2 * math.pi * 2.0 ** -j
    f = GridField(rng.standard_normal((ncomp, M, M, M)), (L, L, L))
    k = f.kmod() * 2.0 ** -j
    mask = (k > 0.9) & (k < 2.2)
    return multiply_spectrum(f, mask.astype(float))


def bony_decompose(f: GridField, g: GridField, profile=None):
    """(T_f g, T_g f, R) with means folded into S and f0 g0 into R."""
    profile = profile or default_profile()
    jf, jg = block_indices(f), block_indices(g)
    fb = {j: dyadic_block(f, j, profile).data for j in jf}
    gb = {j: dyadic_block(g, j, profile).data for j in jg}
    both = list(jf) + list(jg)
    js = range(min(both), max(both) + 1) if both else range(0)
    fmean = f.data.mean(axis=(1, 2, 3), keepdims=True)
    gmean = g.data.mean(axis=(1, 2, 3), keepdims=True)
    zero = np.zeros_like(f.data * g.data)
    tfg, tgf, rem = zero.copy(), zero.copy(), zero.copy() + fmean * gmean
    Sf, Sg = fmean + 0 * f.data, gmean + 0 * g.data
    for j in js:
        # S_{j-1} contains blocks up to j - 2
        if j - 2 in fb:
            Sf = Sf + fb[j - 2]
        if j - 2 in gb:
            Sg = Sg + gb[j - 2]
        if j in gb:
            tfg += Sf * gb[j]
        if j in fb:
            tgf += Sg * fb[j]
            for jj in (j - 1, j, j + 1):
                if jj in gb:
                    rem += fb[j] * gb[jj]
    mk = lambda d: GridField(d, f.period)
    return mk(tfg), mk(tgf), mk(rem)


def kato_ponce_check(f: GridField, g: GridField, s: float, p: float, r: float,
                     p1: float, p2: float, r1: float, r2: float) -> float:
    """||fg||_{B^s_{p,r}} / (||f||_{L^p1} ||g||_{B^s_{p2,r}} + ||g||_{L^r1} ||f||_{B^s_{r2,r}})."""
    prod = f * g
    lhs = besov_norm(prod, BesovIndex(s, p, r)).value
    rhs = (lp_norm(f, p1) * besov_norm(g, BesovIndex(s, p2, r)).value
           + lp_norm(g, r1) * besov_norm(f, BesovIndex(s, r2, r)).value)
    return lhs / rhs
