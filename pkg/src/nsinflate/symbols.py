"""Fourier multiplier symbols as small expression trees.

Leaves are the coordinates xi_1..xi_3, |xi|, numeric constants and the heat
factor exp(-mu t |xi|^2) whose time is bound at evaluation.  Trees print in
prefix notation, e.g. ``(div (var 2) (norm))``, and parse back.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np


class SymbolError(ValueError):
    pass


@dataclass(frozen=True)
class Sym:
    op: str
    args: tuple = ()

    # -- construction -------------------------------------------------------
    def __add__(self, other):
        return Sym("add", (self, as_sym(other)))

    def __radd__(self, other):
        return Sym("add", (as_sym(other), self))

    def __sub__(self, other):
        return Sym("add", (self, Sym("neg", (as_sym(other),))))

    def __rsub__(self, other):
        return Sym("add", (as_sym(other), Sym("neg", (self,))))

    def __mul__(self, other):
        return Sym("mul", (self, as_sym(other)))

    def __rmul__(self, other):
        return Sym("mul", (as_sym(other), self))

    def __truediv__(self, other):
        return Sym("div", (self, as_sym(other)))

    def __rtruediv__(self, other):
        return Sym("div", (as_sym(other), self))

    def __neg__(self):
        return Sym("neg", (self,))

    def __pow__(self, n):
        return Sym("pow", (self, float(n)))

    # -- evaluation ---------------------------------------------------------
    def __call__(self, xi, t: Optional[float] = None):
        xi = np.asarray(xi, dtype=float)
        return self._eval(xi, t)

    def _eval(self, xi, t):
        op, a = self.op, self.args
        if op == "const":
            return np.full(xi.shape[:-1], a[0], dtype=complex if isinstance(a[0], complex) else float)
        if op == "var":
            return xi[..., a[0] - 1]
        if op == "norm":
            return np.sqrt(np.einsum("...i,...i->...", xi, xi))
        if op == "heat":
            if t is None:
                raise SymbolError("heat factor needs a time")
            return np.exp(-a[0] * t * np.einsum("...i,...i->...", xi, xi))
        if op == "neg":
            return -a[0]._eval(xi, t)
        if op == "add":
            return a[0]._eval(xi, t) + a[1]._eval(xi, t)
        if op == "mul":
            return a[0]._eval(xi, t) * a[1]._eval(xi, t)
        if op == "div":
            return a[0]._eval(xi, t) / a[1]._eval(xi, t)
        if op == "pow":
            return a[0]._eval(xi, t) ** a[1]
        raise SymbolError(f"unknown op {op}")

    # -- structure ----------------------------------------------------------
    def leaves(self):
        if self.op in ("const", "var", "norm", "heat"):
            yield self
            return
        for arg in self.args:
            if isinstance(arg, Sym):
                yield from arg.leaves()

    @property
    def is_constant(self) -> bool:
        return all(leaf.op == "const" for leaf in self.leaves())

    @property
    def has_heat(self) -> bool:
        return any(leaf.op == "heat" for leaf in self.leaves())

    @property
    def is_singular(self) -> bool:
        """True when a division or negative power may blow up at xi = 0."""
        if self.op == "div":
            return not self.args[1].is_constant or self.args[0].is_singular
        if self.op == "pow" and self.args[1] < 0:
            return not self.args[0].is_constant
        return any(isinstance(x, Sym) and x.is_singular for x in self.args)

    def degree(self) -> Optional[float]:
        """Homogeneity degree, or None when the symbol is not homogeneous."""
        op, a = self.op, self.args
        if op == "const":
            return 0.0
        if op in ("var", "norm"):
            return 1.0
        if op == "heat":
            return None
        if op == "neg":
            return a[0].degree()
        if op in ("mul", "div"):
            d0, d1 = a[0].degree(), a[1].degree()
            if d0 is None or d1 is None:
                return None
            return d0 + d1 if op == "mul" else d0 - d1
        if op == "pow":
            d = a[0].degree()
            return None if d is None else d * a[1]
        if op == "add":
            d0, d1 = a[0].degree(), a[1].degree()
            if _is_zero_const(a[0]):
                return d1
            if _is_zero_const(a[1]):
                return d0
            return d0 if d0 is not None and d0 == d1 else None
        return None

    def diff(self, i: int) -> "Sym":
        """Partial derivative in xi_i (heat factors are not supported)."""
        op, a = self.op, self.args
        if op == "const":
            return ZERO
        if op == "var":
            return ONE if a[0] == i else ZERO
        if op == "norm":
            return X(i) / NORM
        if op == "heat":
            raise SymbolError("derivative of a heat factor needs its time")
        if op == "neg":
            return -a[0].diff(i)
        if op == "add":
            return a[0].diff(i) + a[1].diff(i)
        if op == "mul":
            return a[0].diff(i) * a[1] + a[0] * a[1].diff(i)
        if op == "div":
            return (a[0].diff(i) * a[1] - a[0] * a[1].diff(i)) / a[1] ** 2
        if op == "pow":
            return const(a[1]) * a[0] ** (a[1] - 1) * a[0].diff(i)
        raise SymbolError(f"unknown op {op}")

    # -- text form ----------------------------------------------------------
    def __str__(self):
        op, a = self.op, self.args
        if op == "const":
            c = a[0]
            if isinstance(c, complex):
                return f"(const {c.real!r} {c.imag!r})"
            return f"(const {c!r})"
        if op == "var":
            return f"(var {a[0]})"
        if op == "norm":
            return "(norm)"
        if op == "heat":
            return f"(heat {a[0]!r})"
        if op == "pow":
            return f"(pow {a[0]} {a[1]!r})"
        return "(" + op + " " + " ".join(str(x) for x in a) + ")"


def _is_zero_const(s: Sym) -> bool:
    return s.op == "const" and s.args[0] == 0


def as_sym(x) -> Sym:
    if isinstance(x, Sym):
        return x
    if isinstance(x, complex):
        return Sym("const", (x,))
    return Sym("const", (float(x),))


def const(c) -> Sym:
    return as_sym(c)


def X(i: int) -> Sym:
    """The coordinate xi_i, i in 1..3."""
    if i not in (1, 2, 3):
        raise SymbolError("coordinate index must be 1, 2 or 3")
    return Sym("var", (i,))


NORM = Sym("norm")
ONE = const(1.0)
ZERO = const(0.0)


def heat(mu: float) -> Sym:
    return Sym("heat", (float(mu),))


def riesz(i: int) -> Sym:
    """Riesz transform R_i: -i xi_i / |xi|."""
    return const(-1j) * X(i) / NORM


def laplacian() -> Sym:
    return -(NORM ** 2)


def leray_entry(i: int, j: int) -> Sym:
    """Entry (i, j) of Id + |D|^-2 grad div, i.e. delta_ij - xi_i xi_j / |xi|^2."""
    off = X(i) * X(j) / NORM ** 2
    return (ONE - off) if i == j else -off


def grad_div_entry(i: int, j: int) -> Sym:
    """Entry of |D|^-2 grad div: -xi_i xi_j / |xi|^2."""
    return -(X(i) * X(j) / NORM ** 2)


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse(text: str) -> Sym:
    tokens = _TOKEN.findall(text)
    pos = 0

    def expr():
        nonlocal pos
        if tokens[pos] != "(":
            raise SymbolError(f"expected '(' at token {pos}")
        pos += 1
        op = tokens[pos]
        pos += 1
        if op == "const":
            vals = []
            while tokens[pos] != ")":
                vals.append(float(tokens[pos]))
                pos += 1
            pos += 1
            return Sym("const", (complex(vals[0], vals[1]) if len(vals) == 2 else vals[0],))
        if op == "var":
            node = Sym("var", (int(tokens[pos]),))
            pos += 2
            return node
        if op == "norm":
            pos += 1
            return NORM
        if op == "heat":
            node = heat(float(tokens[pos]))
            pos += 2
            return node
        if op == "pow":
            base = expr()
            n = float(tokens[pos])
            pos += 2
            return Sym("pow", (base, n))
        args = []
        while tokens[pos] != ")":
            args.append(expr())
        pos += 1
        if op not in ("add", "mul", "div", "neg"):
            raise SymbolError(f"unknown op {op}")
        return Sym(op, tuple(args))

    try:
        out = expr()
    except IndexError as exc:
        raise SymbolError("truncated symbol expression") from exc
    if pos != len(tokens):
        raise SymbolError("trailing tokens in symbol expression")
    return out


# -- sphere polynomial reduction ---------------------------------------------

def _sphere_basis(om):
    x, y, z = om[..., 0], om[..., 1], om[..., 2]
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z], axis=-1)


def sphere_quadratic(sym: Sym, tol: float = 1e-11):
    """Write a degree-0 symbol as c + b.w + w^T Q w on the unit sphere.

    Returns (c, b, Q) or None when the symbol is not of that form or depends
    on |xi|.  Used to collapse angular integrals against radial kernels.
    """
    if sym.has_heat or sym.degree() != 0:
        return None
    rng = np.random.default_rng(12345)
    om = rng.normal(size=(64, 3))
    om /= np.linalg.norm(om, axis=1, keepdims=True)
    vals = np.asarray(sym(om), dtype=complex)
    basis = _sphere_basis(om)
    # x^2 + y^2 + z^2 = 1 makes the basis rank deficient; drop the constant column
    coef, *_ = np.linalg.lstsq(basis[:, 1:], vals, rcond=None)
    resid = basis[:, 1:] @ coef - vals
    if np.abs(resid).max() > tol * max(1.0, np.abs(vals).max()):
        return None
    b = coef[0:3]
    Q = np.zeros((3, 3), dtype=complex)
    Q[0, 0], Q[1, 1], Q[2, 2] = coef[3], coef[4], coef[5]
    Q[0, 1] = Q[1, 0] = coef[6] / 2
    Q[0, 2] = Q[2, 0] = coef[7] / 2
    Q[1, 2] = Q[2, 1] = coef[8] / 2
    c = 0.0
    if np.abs(Q.imag).max() == 0 and np.abs(b.imag).max() == 0:
        return c, b.real, Q.real
    return c, b, Q
