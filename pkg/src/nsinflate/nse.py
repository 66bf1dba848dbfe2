"""Pseudo-spectral simulation of the density-velocity system on a torus.

The box is [0, 2 pi L)^3 with M points per side, so wavenumbers are n / L.
Fields are stored as real-FFT coefficients (``scipy.fft.rfftn`` layout) and
kept inside the dealiased cube |n_i| < dealias * M / 2.  Products are formed
in physical space and truncated again, the usual 2/3 rule.

Operators: ``Q = |D|^-2 grad div`` has symbol -k k^T / |k|^2 (zero on the
mean mode) and the Leray projector is ``I + Q``.  The velocity equation is
advanced with an integrating factor for mu Delta and Heun's method (RK2)
for everything else; the density perturbation ``a = 1/rho - 1`` is advected
in conservative form.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .bump import BUMP_RADIUS, BumpSum, aa_kernel
from .data import DataFamily, build_data, linf_norm
from .lp import BesovIndex, ChemLernerResult, TimeSeriesNorm, chemin_lerner_norm
from .params import ParamSet
from .profile import default_profile

MODES = ("P", "PI", "PI1")
CHECKPOINT_VERSION = "nsinflate-checkpoint/1"


class AliasingError(ValueError):
    pass


class PressureError(RuntimeError):
    def __init__(self, message, radius=float("nan"), iterations=0):
        super().__init__(message)
        self.radius = radius
        self.iterations = iterations


class StabilityError(RuntimeError):
    def __init__(self, message, advective=float("nan"), coupling=float("nan")):
        super().__init__(message)
        self.advective = advective
        self.coupling = coupling


def _threads():
    from .inflation import worker_count
    return worker_count()


# ---------------------------------------------------------------------------
# Torus and grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TorusSpec:
    L: float
    M: int
    dealias: float = 2.0 / 3.0

    def __post_init__(self):
        if self.M < 4 or self.M & (self.M - 1):
            raise ValueError("M must be a power of 2 (at least 4)")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if not 0 < self.dealias <= 1:
            raise ValueError("dealias fraction must lie in (0, 1]")

    @property
    def period(self) -> float:
        return 2 * math.pi * self.L

    @property
    def nmax(self) -> int:
        """Largest retained |n| per axis."""
        return int(math.ceil(self.dealias * self.M / 2)) - 1

    @property
    def kmax(self) -> float:
        return self.nmax / self.L

    @property
    def volume(self) -> float:
        return self.period ** 3

    @classmethod
    def for_data(cls, data: DataFamily, M: int, dealias: float = 2.0 / 3.0) -> "TorusSpec":
        """Largest L = 2^m with every bump under the cutoff and every center on the lattice."""
        reach = max(np.abs(t.c).max() for t in data.a0.terms + data.u0.terms) + BUMP_RADIUS
        probe = cls(1.0, M, dealias)
        m = math.floor(math.log2(probe.nmax / reach))
        if m < -data.params.k0:
            raise AliasingError(f"M={M} cannot hold frequency {reach:g} with lattice-aligned centers")
        return cls(2.0 ** m, M, dealias)

    def check_support(self, f: BumpSum):
        for t in f.terms:
            n = t.c * self.L
            if np.abs(n).max() + BUMP_RADIUS * self.L > self.nmax + 1e-9:
                raise AliasingError("bump support exceeds the dealias cutoff")

    def as_dict(self):
        return {"L": self.L, "M": self.M, "dealias": self.dealias}


class Grid:
    """Wavenumbers, masks and transforms for one torus."""

    def __init__(self, spec: TorusSpec):
        self.spec = spec
        M, L = spec.M, spec.L
        n = np.fft.fftfreq(M, d=1.0 / M)
        nr = np.arange(M // 2 + 1)
        self.shape = (M, M, M)
        self.k = [n[:, None, None] / L, n[None, :, None] / L, nr[None, None, :] / L]
        self.k2 = self.k[0] ** 2 + self.k[1] ** 2 + self.k[2] ** 2
        self.kmod = np.sqrt(self.k2)
        keep = spec.nmax
        self.mask = ((np.abs(n)[:, None, None] <= keep) & (np.abs(n)[None, :, None] <= keep)
                     & (nr[None, None, :] <= keep))
        inv = np.zeros_like(self.k2)
        np.divide(1.0, self.k2, out=inv, where=self.k2 > 0)
        self.inv_k2 = inv
        # rfft half-space weights for Parseval sums
        w = np.full(M // 2 + 1, 2.0)
        w[0] = 1.0
        if M % 2 == 0:
            w[-1] = 1.0
        self.half_weight = w[None, None, :]
        self.dv = (spec.period / M) ** 3

    # transforms ---------------------------------------------------------
    def phys(self, F):
        axes = tuple(range(F.ndim - 3, F.ndim))
        return sfft.irfftn(F, s=self.shape, axes=axes, workers=_threads())

    def spec_(self, f):
        axes = tuple(range(f.ndim - 3, f.ndim))
        return sfft.rfftn(f, axes=axes, workers=_threads()) * self.mask

    # spectral operators ---------------------------------------------------
    def div(self, F):
        return 1j * (self.k[0] * F[0] + self.k[1] * F[1] + self.k[2] * F[2])

    def grad(self, f):
        return np.stack([1j * self.k[i] * f for i in range(3)])

    def lap(self, F):
        return -self.k2 * F

    def Q(self, F):
        """|D|^-2 grad div: -k (k . F) / |k|^2."""
        if not np.any(F):
            return np.zeros_like(F)
        kf = self.k[0] * F[0] + self.k[1] * F[1] + self.k[2] * F[2]
        kf *= self.inv_k2
        out = np.empty_like(F)
        for i in range(3):
            np.multiply(self.k[i], kf, out=out[i])
            np.negative(out[i], out=out[i])
        return out

    def leray(self, F):
        return F + self.Q(F)

    def divergence_ratio(self, F) -> float:
        peak = np.abs(F).max()
        if peak == 0:
            return 0.0
        kf = self.k[0] * F[0] + self.k[1] * F[1] + self.k[2] * F[2]
        return float(np.abs(kf).max() / peak)

    def realify(self, F):
        return self.spec_(self.phys(F))


# ---------------------------------------------------------------------------
# Sparse lattice samples of bump sums
# ---------------------------------------------------------------------------

@dataclass
class SparseModes:
    """Fourier-series coefficients c_n (f = sum c_n e^{i n.x / L}) on a lattice subset."""

    n: np.ndarray  # (K, 3) integers
    c: np.ndarray  # (ncomp, K) complex

    def to_rfft(self, grid: Grid) -> np.ndarray:
        M = grid.spec.M
        out = np.zeros((self.c.shape[0], M, M, M // 2 + 1), dtype=complex)
        keep = self.n[:, 2] >= 0
        idx = self.n[keep] % M
        for i in range(self.c.shape[0]):
            np.add.at(out[i], (idx[:, 0], idx[:, 1], idx[:, 2]), self.c[i, keep] * M ** 3)
        return out


def sample_modes(f: BumpSum, spec: TorusSpec, profile=None) -> SparseModes:
    """Lattice samples f_hat(n / L) / (2 pi L)^3, merged over terms."""
    profile = profile or default_profile()
    L = spec.L
    acc: dict = {}
    for t in f.terms:
        lo = np.ceil((t.c - BUMP_RADIUS) * L - 1e-9).astype(int)
        hi = np.floor((t.c + BUMP_RADIUS) * L + 1e-9).astype(int)
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        n = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        xi = n / L
        bump = profile.phi_hat_vec(xi - t.c)
        keep = bump > 0
        n, xi, bump = n[keep], xi[keep], bump[keep]
        amp = t.amp.to_complex()
        vals = np.stack([amp * bump * sym(xi) for sym in t.symbols])
        for j, key in enumerate(map(tuple, n)):
            acc[key] = acc.get(key, 0) + vals[:, j]
    if not acc:
        return SparseModes(np.zeros((0, 3), int), np.zeros((f.ncomp, 0), complex))
    keys = sorted(acc)
    c = np.stack([acc[k] for k in keys], axis=1) / spec.volume
    return SparseModes(np.array(keys, dtype=int), c)


@dataclass
class Periodized:
    a: np.ndarray
    u: np.ndarray
    a_modes: SparseModes
    u_modes: SparseModes
    periodization_error: float
    sup_a0: float
    whole_space_sup_a0: float
    raw_divergence: float


def _origin_value(f: BumpSum, spec: TorusSpec, profile) -> float:
    m = sample_modes(f, spec, profile)
    return float(np.real(m.c[0].sum()))


def periodize(data: DataFamily, spec: TorusSpec, profile=None) -> Periodized:
    """Sample a0 and u0 on the lattice, enforce realness and zero divergence.

    The periodization error compares a0 at the origin (where every data
    family peaks) with the value on a lattice of twice the period.
    """
    profile = profile or default_profile()
    spec.check_support(data.a0)
    spec.check_support(data.u0)
    grid = Grid(spec)
    am = sample_modes(data.a0, spec, profile)
    um = sample_modes(data.u0, spec, profile)
    a = grid.realify(am.to_rfft(grid))[0]
    u_raw = grid.realify(um.to_rfft(grid))
    raw_div = grid.divergence_ratio(u_raw)
    u = grid.leray(u_raw)
    here = _origin_value(data.a0, spec, profile)
    wider = TorusSpec(2 * spec.L, 2 * spec.M, spec.dealias)
    there = _origin_value(data.a0, wider, profile)
    err = abs(here - there) / max(abs(there), 1e-300)
    sup = float(np.abs(grid.phys(a)).max())
    try:
        ws = 2.0 ** linf_norm(data.a0, profile)[0]
    except ValueError:
        ws = float("nan")
    return Periodized(a, u, am, um, err, sup, ws, raw_div)


# ---------------------------------------------------------------------------
# Nonlinear terms and pressure
# ---------------------------------------------------------------------------

class Terms:
    """Products of one (a, u) state, computed on demand and cached."""

    def __init__(self, grid: Grid, a_hat, u_hat, mu: float):
        self.g = grid
        self.a_hat, self.u_hat, self.mu = a_hat, u_hat, mu
        self._c: dict = {}

    def _get(self, key, fn):
        if key not in self._c:
            self._c[key] = fn()
        return self._c[key]

    @property
    def a(self):
        return self._get("a", lambda: self.g.phys(self.a_hat))

    @property
    def u(self):
        return self._get("u", lambda: self.g.phys(self.u_hat))

    @property
    def a_zero(self):
        return not np.any(self.a_hat)

    def times_a(self, F):
        """Spectrum of a * f for a spectral vector field F."""
        if self.a_zero or not np.any(F):
            return np.zeros_like(F)
        return self.g.spec_(self.a[None] * self.g.phys(F))

    @property
    def ugu(self):
        """u . grad u = div(u (x) u) (div u = 0)."""
        def f():
            u = self.u
            out = np.zeros_like(self.u_hat)
            for i in range(3):
                for j in range(i, 3):
                    prod = self.g.spec_(u[i] * u[j])
                    out[i] += 1j * self.g.k[j] * prod
                    if j != i:
                        out[j] += 1j * self.g.k[i] * prod
            return out
        return self._get("ugu", f)

    @property
    def alap(self):
        """a Delta u."""
        return self._get("alap", lambda: self.times_a(self.g.lap(self.u_hat)))

    @property
    def adv_a(self):
        """u . grad a = div(u a)."""
        def f():
            if self.a_zero:
                return np.zeros_like(self.a_hat)
            return self.g.div(self.g.spec_(self.u * self.a[None]))
        return self._get("adv_a", f)


@dataclass
class PressureResult:
    grad: np.ndarray
    iterations: int
    radius: float
    residual: float


def _rel_max(x, ref):
    r = np.abs(ref).max()
    return float(np.abs(x).max() / r) if r > 0 else float(np.abs(x).max())


def _fixed_point(terms: Terms, source, tol=1e-10, max_iter=400, max_radius=0.9) -> PressureResult:
    """Iterate G = Q(a G) + source to a relative residual below tol."""
    g = terms.g
    if not np.any(source):
        return PressureResult(np.zeros_like(source), 1, 0.0, 0.0)
    if terms.a_zero:
        return PressureResult(source.copy(), 1, 0.0, 0.0)
    sup_a = float(np.abs(terms.a).max())
    if sup_a >= max_radius:
        raise PressureError(f"|a|_inf = {sup_a:.3g} leaves no contraction margin", sup_a, 0)
    G = source
    prev = None
    radius = 0.0
    for it in range(1, max_iter + 1):
        new = g.Q(terms.times_a(G)) + source
        d = np.abs(new - G).max()
        if prev is not None and prev > 0:
            radius = d / prev
            if it > 4 and radius > max_radius:
                raise PressureError(f"fixed point not contracting (radius {radius:.3g})", radius, it)
        prev = d
        G = new
        res = d / max(np.abs(G).max(), 1e-300)
        if res < tol:
            return PressureResult(G, it, radius, float(res))
    raise PressureError("fixed point iteration did not converge", radius, max_iter)


def pressure_gradients(terms: Terms, mode: str = "P") -> PressureResult:
    """Gradient of P, Pi or Pi_1 for the state held by ``terms``."""
    g, mu = terms.g, terms.mu
    if mode == "P":
        src = g.Q(terms.ugu) - mu * g.Q(terms.alap)
    elif mode == "PI":
        src = -mu * g.Q(terms.times_a(g.Q(terms.alap))) + g.Q(terms.ugu)
    elif mode == "PI1":
        src = (-mu * g.Q(terms.times_a(g.Q(terms.alap)))
               + g.Q(terms.times_a(g.Q(terms.ugu))))
    else:
        raise ValueError(f"unknown pressure mode {mode}")
    return _fixed_point(terms, src)


# ---------------------------------------------------------------------------
# State and stepping
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    a: np.ndarray
    u: np.ndarray
    t: float
    spec: TorusSpec
    mu: float = 1.0
    mode: str = "PI"
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def grid(self) -> Grid:
        return _grid(self.spec)

    def terms(self) -> Terms:
        return Terms(self.grid, self.a, self.u, self.mu)

    def sup_a(self) -> float:
        return float(np.abs(self.grid.phys(self.a)).max())


_GRIDS: dict = {}


def _grid(spec: TorusSpec) -> Grid:
    if spec not in _GRIDS:
        if len(_GRIDS) > 4:
            _GRIDS.clear()
        _GRIDS[spec] = Grid(spec)
    return _GRIDS[spec]


def pressure_solve(state: SimState, mode: str | None = None) -> PressureResult:
    return pressure_gradients(state.terms(), mode or state.mode)


@dataclass
class IdentityCheck:
    pi_vs_p: float
    pi1_vs_p: float
    iterations: dict


def pressure_identities(terms: Terms) -> IdentityCheck:
    """Relative defects of grad Pi = grad P + mu Q(a Lap u) and the Pi_1 analogue."""
    g, mu = terms.g, terms.mu
    rp = pressure_gradients(terms, "P")
    rpi = pressure_gradients(terms, "PI")
    rpi1 = pressure_gradients(terms, "PI1")
    corr = mu * g.Q(terms.alap)
    conv = g.Q(terms.ugu)
    ref = max(np.abs(rp.grad).max(), np.abs(corr).max(), np.abs(conv).max(), 1e-300)
    e1 = np.abs(rpi.grad - (rp.grad + corr)).max() / ref
    e2 = np.abs(rpi1.grad - (rp.grad + corr - conv)).max() / ref
    if not (np.any(rp.grad) or np.any(corr) or np.any(conv)):
        e1 = e2 = 0.0
    its = {"P": rp.iterations, "PI": rpi.iterations, "PI1": rpi1.iterations}
    return IdentityCheck(float(e1), float(e2), its)


def rhs(terms: Terms, mode: str):
    """Time derivatives (a_t, u_t minus mu Lap u) for the chosen formulation."""
    g, mu = terms.g, terms.mu
    da = -terms.adv_a
    gp = pressure_gradients(terms, "P")
    du = -terms.ugu - terms.times_a(gp.grad) + mu * terms.alap
    if mode == "P":
        du = du - gp.grad
    else:
        own = pressure_gradients(terms, mode)
        du = du - own.grad + mu * g.Q(terms.alap)
        if mode == "PI1":
            du = du - g.Q(terms.ugu)
    return da, du, gp.iterations


def stability(state: SimState, dt: float):
    """(advective CFL, explicit coupling number mu |a|_inf kmax^2 dt)."""
    g = state.grid
    u = g.phys(state.u)
    umax = float(np.sqrt((u ** 2).sum(axis=0)).max())
    h = state.spec.period / state.spec.M
    kmax2 = 3 * state.spec.kmax ** 2
    return umax * dt / h, state.mu * state.sup_a() * kmax2 * dt


def step(state: SimState, dt: float, check: bool = True, terms: Terms | None = None) -> SimState:
    """One integrating-factor Heun step; Leray projection re-applied.

    ``terms`` may carry products of the current state computed elsewhere.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = state.grid
    if check:
        adv, coup = stability(state, dt)
        if adv > 1.0 or coup > 1.0:
            raise StabilityError(f"dt={dt:.3g} violates stability (CFL {adv:.3g}, coupling {coup:.3g})", adv, coup)
    E = np.exp(-state.mu * g.k2 * dt)
    t1 = terms or Terms(g, state.a, state.u, state.mu)
    da1, du1, _ = rhs(t1, state.mode)
    a_s = state.a + dt * da1
    u_s = g.leray(E * (state.u + dt * du1))
    t2 = Terms(g, a_s, u_s, state.mu)
    da2, du2, _ = rhs(t2, state.mode)
    a_n = (state.a + 0.5 * dt * (da1 + da2)) * g.mask
    u_n = g.leray((E * state.u + 0.5 * dt * (E * du1 + du2)) * g.mask)
    return SimState(a_n, u_n, state.t + dt, state.spec, state.mu, state.mode, state.history)


# ---------------------------------------------------------------------------
# Classical Navier-Stokes oracle (rotational form, full complex FFT)
# ---------------------------------------------------------------------------

class ClassicalNSE:
    """Independent a = 0 reference: u_t = mu Lap u + P(u x omega)."""

    def __init__(self, spec: TorusSpec, mu: float = 1.0):
        self.spec, self.mu = spec, mu
        M, L = spec.M, spec.L
        n = np.fft.fftfreq(M, d=1.0 / M)
        K = np.meshgrid(n / L, n / L, n / L, indexing="ij")
        self.K = np.stack(K)
        self.K2 = (self.K ** 2).sum(axis=0)
        self.inv = np.where(self.K2 > 0, 1.0 / np.where(self.K2 > 0, self.K2, 1.0), 0.0)
        keep = spec.nmax
        self.mask = np.all(np.abs(np.stack(np.meshgrid(n, n, n, indexing="ij"))) <= keep, axis=0)

    def from_rfft(self, F):
        u = sfft.irfftn(F, s=(self.spec.M,) * 3, axes=(1, 2, 3))
        return np.fft.fftn(u, axes=(1, 2, 3))

    def to_rfft(self, U):
        u = np.fft.ifftn(U, axes=(1, 2, 3)).real
        return sfft.rfftn(u, axes=(1, 2, 3))

    def project(self, U):
        kd = (self.K * U).sum(axis=0)
        return U - self.K * kd * self.inv

    def nonlinear(self, U):
        u = np.fft.ifftn(U, axes=(1, 2, 3)).real
        W = 1j * np.stack([self.K[1] * U[2] - self.K[2] * U[1],
                           self.K[2] * U[0] - self.K[0] * U[2],
                           self.K[0] * U[1] - self.K[1] * U[0]])
        w = np.fft.ifftn(W, axes=(1, 2, 3)).real
        cross = np.stack([u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]])
        return self.project(np.fft.fftn(cross, axes=(1, 2, 3)) * self.mask)

    def step(self, U, dt):
        E = np.exp(-self.mu * self.K2 * dt)
        n1 = self.nonlinear(U)
        Us = E * (U + dt * n1)
        n2 = self.nonlinear(Us)
        return self.project((E * U + 0.5 * dt * (E * n1 + n2)) * self.mask)


def oracle_agreement(u_hat, spec: TorusSpec, dt: float, steps: int, mu: float = 1.0, mode: str = "PI"):
    """Max per-step relative difference between the solver with a = 0 and the classical oracle.

    Both start each step from the solver's state, so the figure is a one-step defect.
    """
    ref = ClassicalNSE(spec, mu)
    state = SimState(np.zeros(u_hat.shape[1:], complex), u_hat.copy(), 0.0, spec, mu, mode)
    worst = 0.0
    for _ in range(steps):
        nxt = step(state, dt)
        U = ref.step(ref.from_rfft(state.u), dt)
        mine = ref.from_rfft(nxt.u)
        scale = max(np.abs(mine).max(), 1e-300)
        worst = max(worst, float(np.abs(U - mine).max() / scale))
        state = nxt
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: SimState, path, extra: dict | None = None):
    meta = {"version": CHECKPOINT_VERSION, "t": state.t, "mu": state.mu, "mode": state.mode,
            "spec": state.spec.as_dict(), "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, a=state.a, u=state.u, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_checkpoint(path) -> SimState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        spec = TorusSpec(**meta["spec"])
        return SimState(z["a"], z["u"], float(meta["t"]), spec, float(meta["mu"]), meta["mode"])


# ---------------------------------------------------------------------------
# First iterate U1 on the lattice
# ---------------------------------------------------------------------------

class LatticeU1:
    """U1(t) = mu int_0^t e^{mu Lap (t - s)} P(a0 Lap U0(s)) ds, exact in time.

    Lattice analogue of the bump pairing: each pair of a0 and u0 modes
    contributes with the time kernel of the bump calculus.
    """

    def __init__(self, am: SparseModes, um: SparseModes, grid: Grid, mu: float):
        self.grid, self.mu = grid, mu
        na, nu = len(am.n), len(um.n)
        L = grid.spec.L
        n = (am.n[:, None, :] + um.n[None, :, :]).reshape(-1, 3)
        self.keys, inv = np.unique(n, axis=0, return_inverse=True)
        self.inv = inv.reshape(-1)
        km2 = ((um.n / L) ** 2).sum(axis=1)
        self.xi2 = ((self.keys / L) ** 2).sum(axis=1)[self.inv]
        self.eta2 = np.tile(km2, na)
        coef = am.c[0][:, None, None] * (-km2)[None, None, :] * um.c[None, :, :]  # (na, 3, nu)
        self.coef = np.transpose(coef, (1, 0, 2)).reshape(3, na * nu)
        kk = self.keys / L
        kn2 = (kk ** 2).sum(axis=1)
        inv2 = np.where(kn2 > 0, 1.0 / np.where(kn2 > 0, kn2, 1.0), 0.0)
        self.proj = np.eye(3)[None] - kk[:, :, None] * kk[:, None, :] * inv2[:, None, None]
        keep = np.all(np.abs(self.keys) <= grid.spec.nmax, axis=1)
        self.keep = keep

    def modes(self, t: float) -> SparseModes:
        if t <= 0:
            return SparseModes(self.keys[:0], np.zeros((3, 0), complex))
        A = aa_kernel(t, self.xi2, self.eta2, self.mu)
        vals = np.zeros((3, len(self.keys)), dtype=complex)
        for i in range(3):
            np.add.at(vals[i], self.inv, self.coef[i] * A)
        vals = self.mu * np.einsum("kij,jk->ik", self.proj, vals)
        return SparseModes(self.keys[self.keep], vals[:, self.keep])

    def rfft(self, t: float) -> np.ndarray:
        return self.modes(t).to_rfft(self.grid)


# ---------------------------------------------------------------------------
# Probe run
# ---------------------------------------------------------------------------

class BlockNorms:
    """Per-block L^p norms of spectral fields on one grid."""

    def __init__(self, grid: Grid, profile=None):
        self.grid = grid
        self.profile = profile or default_profile()
        live = np.flatnonzero(grid.mask & (grid.kmod > 0))
        kl = grid.kmod.reshape(-1)[live]
        lo = int(math.floor(math.log2(kl.min() / (8.0 / 3.0))))
        hi = int(math.ceil(math.log2(kl.max() / 0.75)))
        self.js = list(range(lo, hi + 1))
        self.support = {}
        for j in self.js:
            w = self.profile.block_weight(kl, j)
            nz = w > 0
            self.support[j] = (live[nz], w[nz])

    def values(self, F, p: float):
        out = np.zeros(len(self.js))
        if F.ndim == 3:
            F = F[None]
        flat = F.reshape(F.shape[0], -1)
        for i, j in enumerate(self.js):
            idx, w = self.support[j]
            vals = flat[:, idx]
            if not np.any(vals):
                continue
            B = np.zeros_like(flat)
            B[:, idx] = vals * w
            mod = np.sqrt((self.grid.phys(B.reshape(F.shape)) ** 2).sum(axis=0))
            out[i] = _lp(mod, p, self.grid.dv)
        return out


def _lp(mod, p, dv):
    if math.isinf(p):
        return float(mod.max())
    peak = mod.max()
    if peak == 0:
        return 0.0
    return float(peak * ((mod / peak) ** p).sum() ** (1.0 / p) * dv ** (1.0 / p))


def _mean_norm(F, grid: Grid, p: float) -> float:
    """L^p norm of the mean mode of a spectral field."""
    if F.ndim == 3:
        F = F[None]
    m = np.sqrt((np.abs(F[:, 0, 0, 0]) ** 2).sum()) / grid.spec.M ** 3
    return float(m * grid.spec.volume ** (0 if math.isinf(p) else 1.0 / p))


def probe_norm(F, grid: Grid, radius: float, p: float = 6.0) -> float:
    """L^p norm of the part of F with |k| < radius (mean included)."""
    if F.ndim == 3:
        F = F[None]
    low = F * (grid.kmod < radius)[None]
    if not np.any(low):
        return 0.0
    mod = np.sqrt((grid.phys(low) ** 2).sum(axis=0))
    return _lp(mod, p, grid.dv)


@dataclass
class ProbeReport:
    regime: str
    N: int
    k0: int
    spec: TorusSpec
    mode: str
    T0: float
    dt: float
    steps: int
    Y: float
    X: float
    U1_probe: float
    U0_probe: float
    u_probe: float
    a0_scale: float
    final_lhs: float
    final_rhs: float
    max_divergence: float
    max_identity_error: float
    max_iterations: int
    max_cfl: float
    max_coupling: float
    mean_a_drift: float
    periodization_error: float
    sup_a0_grid: float
    sup_a0_whole_space: float
    flagged_time_norm: bool
    elapsed: float
    history: list = field(default_factory=list, repr=False)

    @property
    def y_ratio(self) -> float:
        return self.Y / self.U1_probe if self.U1_probe > 0 else (0.0 if self.Y == 0 else math.inf)

    @property
    def x_ratio(self) -> float:
        return self.X / self.a0_scale if self.a0_scale > 0 else (0.0 if self.X == 0 else math.inf)

    @property
    def final_ok(self) -> bool:
        return self.final_lhs >= self.final_rhs and self.final_rhs > 0

    def as_dict(self):
        d = {k: getattr(self, k) for k in (
            "regime", "N", "k0", "mode", "T0", "dt", "steps", "Y", "X", "U1_probe", "U0_probe", "u_probe",
            "a0_scale", "final_lhs", "final_rhs", "max_divergence", "max_identity_error", "max_iterations",
            "max_cfl", "max_coupling", "mean_a_drift", "periodization_error", "sup_a0_grid",
            "sup_a0_whole_space", "flagged_time_norm", "elapsed")}
        d.update(spec=self.spec.as_dict(), y_ratio=self.y_ratio, x_ratio=self.x_ratio, final_ok=self.final_ok)
        return d

    def write_csv(self, path, header: dict | None = None):
        if not self.history:
            return
        keys = list(self.history[0])
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in self.history:
                w.writerow(row)


def _indices(ps: ParamSet, regime: str):
    """(q for the Y surrogate, X surrogate index)."""
    q = float(ps.q) if ps.q is not None else 4.0
    if regime == "THM1" and ps.p0 is not None:
        p0 = float(ps.p0)
        xi = BesovIndex(3.0 / p0, p0, 1)
    else:
        xi = BesovIndex(0.5, 6.0, 1)
    return q, xi


def run_probe(ps: ParamSet, spec: TorusSpec | None = None, mode: str = "PI", regime: str = "THM1",
              M: int = 128, steps: int = 256, profile=None, check: bool = True,
              identities_every: int = 1, data: DataFamily | None = None, checkpoint=None,
              probe_radius: float | None = None, progress=None) -> ProbeReport:
    """Integrate to T0 and measure U2 = u - U0 - U1 and a1 = a - a0."""
    t_start = time.perf_counter()
    regime = regime.upper()
    if check and not (4 <= ps.k0 <= 6 and 6 <= ps.N <= 9):
        raise ValueError("run_probe expects the small regime k0 in [4, 6], N in [6, 9]")
    profile = profile or default_profile()
    data = data or build_data(ps, regime, check=check)
    spec = spec or TorusSpec.for_data(data, M)
    grid = _grid(spec)
    per = periodize(data, spec, profile)
    T0 = ps.T0
    dt = T0 / steps
    mu = ps.mu
    state = SimState(per.a.copy(), per.u.copy(), 0.0, spec, mu, mode)
    u1 = LatticeU1(per.a_modes, per.u_modes, grid, mu)
    q, xidx = _indices(ps, regime)
    blocks = BlockNorms(grid, profile)
    radius = probe_radius or 2.0 ** (ps.k0 - 1)
    a0_hat = per.a
    u0_hat = per.u
    mean_a0 = a0_hat[0, 0, 0].real

    u2_rows, a1_rows, mean_u2 = [], [], []
    max_div, max_id, max_it, max_cfl, max_coup, drift = 0.0, 0.0, 0, 0.0, 0.0, 0.0
    hist = []

    def record(st: SimState, n: int):
        nonlocal max_div, max_id, max_it, drift
        U0 = np.exp(-mu * grid.k2 * st.t) * u0_hat
        U1 = u1.rfft(st.t) * grid.mask
        U2 = st.u - U0 - U1
        a1 = st.a - a0_hat
        u2_rows.append(blocks.values(U2, q))
        a1_rows.append(blocks.values(a1, xidx.p))
        mean_u2.append(_mean_norm(U2, grid, q))
        max_div = max(max_div, grid.divergence_ratio(st.u))
        drift = max(drift, abs(st.a[0, 0, 0].real - mean_a0) / max(np.abs(a0_hat).max(), 1e-300))
        row = {"step": n, "t": st.t, "div": grid.divergence_ratio(st.u),
               "U1_probe": probe_norm(U1, grid, radius), "U2_mean": mean_u2[-1]}
        terms = st.terms()
        if identities_every and (n % identities_every == 0 or n == steps):
            chk = pressure_identities(terms)
            max_id = max(max_id, chk.pi_vs_p, chk.pi1_vs_p)
            max_it = max(max_it, *chk.iterations.values())
            row["id_PI"], row["id_PI1"] = chk.pi_vs_p, chk.pi1_vs_p
        for j, v in zip(blocks.js, u2_rows[-1]):
            row[f"U2_j{j}"] = v
        for j, v in zip(blocks.js, a1_rows[-1]):
            row[f"a1_j{j}"] = v
        hist.append(row)
        st.history.append(row)
        return U0, U1, terms

    _, _, terms = record(state, 0)
    for n in range(1, steps + 1):
        adv, coup = stability(state, dt)
        max_cfl, max_coup = max(max_cfl, adv), max(max_coup, coup)
        state = step(state, dt, terms=terms)
        U0, U1, terms = record(state, n)
        if progress:
            progress(n, steps)
    if checkpoint:
        save_checkpoint(state, checkpoint, {"regime": regime, "params": ps.as_dict()})

    su2 = TimeSeriesNorm(dt, np.array(u2_rows), blocks.js)
    sa1 = TimeSeriesNorm(dt, np.array(a1_rows), blocks.js)
    y_inf = chemin_lerner_norm(su2, BesovIndex(3.0 / q - 1, q, 1), math.inf)
    y_one = chemin_lerner_norm(su2, BesovIndex(3.0 / q + 1, q, 1), 1.0)
    x_inf = chemin_lerner_norm(sa1, xidx, math.inf)
    # the mean mode has no dyadic block on the torus; it enters with unit weight
    Y = y_inf.value + y_one.value + max(mean_u2)
    X = x_inf.value
    a0_blocks = blocks.values(a0_hat, xidx.p)
    a0_scale = float(sum(2.0 ** (xidx.s * j) * v for j, v in zip(blocks.js, a0_blocks)))
    U1p = probe_norm(U1, grid, radius)
    U0p = probe_norm(U0, grid, radius)
    up = probe_norm(state.u, grid, radius)
    return ProbeReport(regime, ps.N, ps.k0, spec, mode, T0, dt, steps, Y, X, U1p, U0p, up, a0_scale,
                       up, U1p - U0p - Y, max_div, max_id, max_it, max_cfl, max_coup, drift,
                       per.periodization_error, per.sup_a0, per.whole_space_sup_a0,
                       bool(y_one.flagged), time.perf_counter() - t_start, hist)


def zero_data_probe(ps: ParamSet, spec: TorusSpec, steps: int = 4, regime: str = "THM1") -> ProbeReport:
    """Probe run with both fields scaled to zero."""
    data = build_data(ps, regime, check=False, a_scale=0.0, u_scale=0.0)
    return run_probe(ps, spec, regime=regime, steps=steps, check=False, data=data)
