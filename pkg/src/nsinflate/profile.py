"""Radial Littlewood-Paley profile and the compactly supported bump.

Both radial functions are built from one smooth transition ``psi`` on [0, 1],
the normalized integral of exp(-1/(s(1-s))).  ``psi`` is tabulated with its
first two derivatives and evaluated by quintic Hermite interpolation, so every
consumer sees the same bit-identical table.

    chi(r)     = 1 - psi((r - 3/4) / (4/3 - 3/4))     low-pass, 1 on r <= 3/4
    phi(r)     = chi(r / 2) - chi(r)                 annulus, support [3/4, 8/3]
    phi_hat(r) = 1 - psi(r - 1)                      bump, 1 on r <= 1, 0 on r >= 2
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

CHI_LO = 0.75
CHI_HI = 4.0 / 3.0
SUPPORT_LO = 0.75
SUPPORT_HI = 8.0 / 3.0

_MAGIC = b"NSIPHI"
_FORMAT_VERSION = 1
_PARTITION_TOL = 1e-8


class ProfileError(ValueError):
    pass


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    out[inside] = np.exp(-1.0 / (si * (1.0 - si)))
    return out


def _bump_derivative(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = (s > 0) & (s < 1)
    si = s[inside]
    w = si * (1.0 - si)
    out[inside] = np.exp(-1.0 / w) * (1.0 - 2.0 * si) / (w * w)
    return out


def _tabulate_bump_transition(resolution):
    """Cumulative integral of the bump on a uniform grid, 16-point Gauss per cell."""
    x = np.linspace(0.0, 1.0, resolution + 1)
    nodes, weights = np.polynomial.legendre.leggauss(16)
    h = 1.0 / resolution
    pts = x[:-1, None] + 0.5 * h * (nodes[None, :] + 1.0)
    cell = 0.5 * h * (_bump(pts) @ weights)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    total = cum[-1]
    psi = cum / total
    dpsi = _bump(x) / total
    d2psi = _bump_derivative(x) / total
    psi[-1] = 1.0
    return psi, dpsi, d2psi


def _tabulate_callable(func, resolution):
    x = np.linspace(0.0, 1.0, resolution + 1)
    h = 1e-5
    psi = np.asarray(func(x), dtype=float)
    xp = np.clip(x + h, 0, 1)
    xm = np.clip(x - h, 0, 1)
    dpsi = (func(xp) - func(xm)) / (xp - xm)
    d2psi = (func(xp) - 2 * func(x) + func(xm)) / h**2
    return psi, dpsi, d2psi


@dataclass(frozen=True)
class DyadicProfile:
    """Tabulated transition plus the probe scale used by the inflation pairing.

    ``probe_scale`` is the integer m in phi(2^m xi); the default is 8.
    """

    psi: np.ndarray
    dpsi: np.ndarray
    d2psi: np.ndarray
    probe_scale: int = 8
    kind: str = "bump"
    _h: float = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_h", 1.0 / (len(self.psi) - 1))

    @property
    def resolution(self) -> int:
        return len(self.psi) - 1

    # -- transition ---------------------------------------------------------
    def transition(self, x):
        """Quintic Hermite evaluation of psi, clamped to 0 below 0 and 1 above 1."""
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, 0.0, 1.0)
        h = self._h
        i = np.minimum((xc / h).astype(np.int64), self.resolution - 1)
        t = xc / h - i
        t2 = t * t
        t3 = t2 * t
        t4 = t3 * t
        t5 = t4 * t
        h00 = 1 - 10 * t3 + 15 * t4 - 6 * t5
        h10 = t - 6 * t3 + 8 * t4 - 3 * t5
        h20 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5
        h01 = 10 * t3 - 15 * t4 + 6 * t5
        h11 = -4 * t3 + 7 * t4 - 3 * t5
        h21 = 0.5 * t3 - t4 + 0.5 * t5
        p, dp, ddp = self.psi, self.dpsi, self.d2psi
        return (
            h00 * p[i] + h10 * h * dp[i] + h20 * h * h * ddp[i]
            + h01 * p[i + 1] + h11 * h * dp[i + 1] + h21 * h * h * ddp[i + 1]
        )

    def transition_derivative(self, x):
        """Derivative of the quintic Hermite interpolant used by ``transition``."""
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, 0.0, 1.0)
        h = self._h
        i = np.minimum((xc / h).astype(np.int64), self.resolution - 1)
        t = xc / h - i
        t2 = t * t
        t3 = t2 * t
        t4 = t3 * t
        d00 = -30 * t2 + 60 * t3 - 30 * t4
        d10 = 1 - 18 * t2 + 32 * t3 - 15 * t4
        d20 = t - 4.5 * t2 + 6 * t3 - 2.5 * t4
        d11 = -12 * t2 + 28 * t3 - 15 * t4
        d21 = 1.5 * t2 - 4 * t3 + 2.5 * t4
        p, dp, ddp = self.psi, self.dpsi, self.d2psi
        val = (d00 * (p[i] - p[i + 1]) / h + d10 * dp[i] + d20 * h * ddp[i]
               + d11 * dp[i + 1] + d21 * h * ddp[i + 1])
        return np.where((x < 0) | (x > 1), 0.0, val)

    # -- radial functions ---------------------------------------------------
    def chi(self, r):
        return 1.0 - self.transition((np.asarray(r, dtype=float) - CHI_LO) / (CHI_HI - CHI_LO))

    def phi(self, r):
        """Annulus profile as a function of |xi|."""
        r = np.asarray(r, dtype=float)
        return self.chi(0.5 * r) - self.chi(r)

    def phi_hat(self, r):
        """Bump profile as a function of |xi|."""
        return 1.0 - self.transition(np.asarray(r, dtype=float) - 1.0)

    def phi_hat_derivative(self, r):
        return -self.transition_derivative(np.asarray(r, dtype=float) - 1.0)

    def phi_vec(self, xi):
        return self.phi(np.linalg.norm(xi, axis=-1))

    def phi_hat_vec(self, xi):
        return self.phi_hat(np.linalg.norm(xi, axis=-1))

    def block_weight(self, r, j):
        """phi(2^-j r), the multiplier of the j-th dyadic block."""
        return self.phi(np.ldexp(np.asarray(r, dtype=float), -int(j)))

    def probe(self, r):
        """phi(2^m r) with m = probe_scale."""
        return self.phi(np.ldexp(np.asarray(r, dtype=float), self.probe_scale))

    @property
    def probe_radii(self):
        return SUPPORT_LO * 2.0 ** -self.probe_scale, SUPPORT_HI * 2.0 ** -self.probe_scale

    # -- persistence --------------------------------------------------------
    def to_bytes(self) -> bytes:
        n = len(self.psi)
        head = _MAGIC + struct.pack("<HIi", _FORMAT_VERSION, n, self.probe_scale)
        body = np.concatenate([self.psi, self.dpsi, self.d2psi]).astype("<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DyadicProfile":
        if blob[: len(_MAGIC)] != _MAGIC:
            raise ProfileError("not a profile table")
        off = len(_MAGIC)
        version, n, probe_scale = struct.unpack_from("<HIi", blob, off)
        if version != _FORMAT_VERSION:
            raise ProfileError(f"unsupported profile table version {version}")
        off += struct.calcsize("<HIi")
        data = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=off).astype(float)
        return cls(data[:n].copy(), data[n : 2 * n].copy(), data[2 * n :].copy(), probe_scale, "table")

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DyadicProfile":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def table_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def partition_defect(profile: DyadicProfile, r) -> np.ndarray:
    """|sum_j phi(2^-j r) - 1| for each sample radius."""
    r = np.asarray(r, dtype=float)
    # phi(2^-j r) vanishes unless 3/4 <= 2^-j r <= 8/3, so only j near log2 r contribute
    j0 = np.floor(np.log2(r)).astype(int)
    total = np.zeros_like(r)
    for off in range(-2, 3):
        total += profile.phi(np.ldexp(r, -(j0 + off)))
    return np.abs(total - 1.0)


def make_dyadic_profile(
    transition_kind: str | Callable = "bump", resolution: int = 4096, probe_scale: int = 8
) -> DyadicProfile:
    """Build and validate a profile.

    ``transition_kind`` is ``"bump"`` (the canonical choice) or a callable
    psi: [0, 1] -> [0, 1]; callables are checked for the profile invariants
    and rejected when they break them.
    """
    if resolution < 256:
        raise ProfileError("resolution must be at least 256 samples")
    if transition_kind == "bump":
        psi, dpsi, d2psi = _tabulate_bump_transition(resolution)
        kind = "bump"
    elif callable(transition_kind):
        psi, dpsi, d2psi = _tabulate_callable(transition_kind, resolution)
        kind = getattr(transition_kind, "__name__", "custom")
    else:
        raise ProfileError(f"unknown transition kind {transition_kind!r}")
    prof = DyadicProfile(psi, dpsi, d2psi, probe_scale, kind)
    _validate(prof)
    return prof


def _validate(prof: DyadicProfile):
    if abs(prof.psi[0]) > 1e-12 or abs(prof.psi[-1] - 1.0) > 1e-12:
        raise ProfileError("transition must run from 0 to 1")
    r = np.linspace(0.5, 3.0, 20001)
    phi = prof.phi(r)
    if phi.min() < -1e-12:
        raise ProfileError("phi takes negative values")
    outside = (r < SUPPORT_LO) | (r > SUPPORT_HI)
    if np.abs(phi[outside]).max() > 0:
        raise ProfileError("phi leaks outside 3/4 <= |xi| <= 8/3")
    if partition_defect(prof, r).max() > _PARTITION_TOL:
        raise ProfileError("partition of unity violated")


_DEFAULT: DyadicProfile | None = None


def default_profile() -> DyadicProfile:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = make_dyadic_profile()
    return _DEFAULT
