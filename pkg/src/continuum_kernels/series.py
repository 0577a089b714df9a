"""Exact sparse algebra for truncated multivariate power series.

Series live in up to four variables: the spatial pair (x, xi), the ensemble
variable y, and the integration variable eta. Coefficients are stored in a
dict keyed by exponent tuples; absent keys are zero. All operations return
new objects, so series values are immutable in practice and safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Var",
    "TruncatedSeries",
    "AnalyticFactor",
    "Polynomial",
    "Exp",
    "Cos",
    "Sin",
    "Constant",
    "SeparableTerm",
    "SeparableSum",
    "taylor",
]

# Coefficients below this magnitude are dropped from storage. Deliberately at
# the underflow edge: pruning must never change assembled systems.
PRUNE_TOL = 1e-300


class Var(str, Enum):
    """Variable identifiers in canonical order (x, xi, y, eta)."""

    X = "x"
    XI = "xi"
    Y = "y"
    ETA = "eta"


VAR_ORDER: tuple[Var, ...] = (Var.X, Var.XI, Var.Y, Var.ETA)
_VAR_RANK = {v: i for i, v in enumerate(VAR_ORDER)}


def _canonical_vars(vars_: Iterable[Var]) -> tuple[Var, ...]:
    vs = tuple(sorted(set(vars_), key=lambda v: _VAR_RANK[v]))
    return vs


def grlex_key(exps: tuple[int, ...]) -> tuple:
    """Graded-lexicographic sort key: total degree first, then exponents."""
    return (sum(exps), exps)


@dataclass(frozen=True)
class TruncatedSeries:
    """Sparse polynomial over an ordered subset of the canonical variables.

    ``coeffs`` maps exponent tuples (aligned with ``vars``) to floats.
    ``degree_cap`` records the per-variable maximum exponent the series is
    allowed to hold; it is bookkeeping for truncation decisions, every stored
    exponent respects it componentwise.
    """

    vars: tuple[Var, ...]
    coeffs: dict[tuple[int, ...], float]
    degree_cap: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        cleaned = {
            tuple(e): float(c)
            for e, c in self.coeffs.items()
            if abs(c) > PRUNE_TOL
        }
        object.__setattr__(self, "coeffs", cleaned)
        if not self.degree_cap:
            cap = tuple(
                max((e[i] for e in cleaned), default=0)
                for i in range(len(self.vars))
            )
            object.__setattr__(self, "degree_cap", cap)
        for e in cleaned:
            if len(e) != len(self.vars):
                raise ValueError(f"exponent tuple {e} does not match vars {self.vars}")
            if any(ei > ci for ei, ci in zip(e, self.degree_cap)):
                raise ValueError(f"exponent {e} exceeds degree cap {self.degree_cap}")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(vars_: Iterable[Var] = ()) -> TruncatedSeries:
        return TruncatedSeries(_canonical_vars(vars_), {})

    @staticmethod
    def constant(c: float) -> TruncatedSeries:
        return TruncatedSeries((), {(): float(c)} if c else {})

    @staticmethod
    def monomial(exps: Mapping[Var, int], coeff: float = 1.0) -> TruncatedSeries:
        vs = _canonical_vars(exps.keys())
        key = tuple(exps[v] for v in vs)
        return TruncatedSeries(vs, {key: float(coeff)})

    # -- structure ---------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.coeffs

    def total_degree(self) -> int:
        return max((sum(e) for e in self.coeffs), default=0)

    def degree_in(self, v: Var) -> int:
        if v not in self.vars:
            return 0
        i = self.vars.index(v)
        return max((e[i] for e in self.coeffs), default=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TruncatedSeries):
            return NotImplemented
        return self.vars == other.vars and self.coeffs == other.coeffs

    def __str__(self) -> str:
        if not self.coeffs:
            return "0"
        parts = []
        for e, c in sorted(self.coeffs.items(), key=lambda kv: grlex_key(kv[0])):
            mono = "*".join(f"{v.value}^{p}" if p > 1 else v.value
                            for v, p in zip(self.vars, e) if p)
            parts.append(f"{c:g}*{mono}" if mono else f"{c:g}")
        return " + ".join(parts)

    def __hash__(self):
        return hash((self.vars, tuple(sorted(self.coeffs.items()))))

    def align_to(self, vars_: tuple[Var, ...]) -> TruncatedSeries:
        """Re-express over a superset of variables (new exponents are 0)."""
        if vars_ == self.vars:
            return self
        if not set(self.vars) <= set(vars_):
            raise ValueError(f"cannot align {self.vars} to {vars_}")
        pos = [vars_.index(v) for v in self.vars]
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            key = [0] * len(vars_)
            for p, ei in zip(pos, e):
                key[p] = ei
            out[tuple(key)] = c
        cap = [0] * len(vars_)
        for p, ci in zip(pos, self.degree_cap):
            cap[p] = ci
        return TruncatedSeries(vars_, out, tuple(cap))

    # -- ring operations ---------------------------------------------------

    def __add__(self, other: TruncatedSeries) -> TruncatedSeries:
        vs = _canonical_vars(self.vars + other.vars)
        a = self.align_to(vs)
        b = other.align_to(vs)
        out = dict(a.coeffs)
        for e, c in b.coeffs.items():
            out[e] = out.get(e, 0.0) + c
        cap = tuple(max(ca, cb) for ca, cb in zip(a.degree_cap, b.degree_cap))
        return TruncatedSeries(vs, out, cap)

    def __neg__(self) -> TruncatedSeries:
        return TruncatedSeries(self.vars, {e: -c for e, c in self.coeffs.items()},
                               self.degree_cap)

    def __sub__(self, other: TruncatedSeries) -> TruncatedSeries:
        return self + (-other)

    def scale(self, s: float) -> TruncatedSeries:
        if s == 0.0:
            return TruncatedSeries.zero(self.vars)
        return TruncatedSeries(self.vars, {e: s * c for e, c in self.coeffs.items()},
                               self.degree_cap)

    def __mul__(self, other: TruncatedSeries) -> TruncatedSeries:
        """Exact polynomial product. Never re-truncates: products of order-N
        operands legitimately carry terms up to order 2N."""
        vs = _canonical_vars(self.vars + other.vars)
        a = self.align_to(vs)
        b = other.align_to(vs)
        out: dict[tuple[int, ...], float] = {}
        for ea, ca in a.coeffs.items():
            for eb, cb in b.coeffs.items():
                key = tuple(i + j for i, j in zip(ea, eb))
                out[key] = out.get(key, 0.0) + ca * cb
        cap = tuple(ca + cb for ca, cb in zip(a.degree_cap, b.degree_cap))
        return TruncatedSeries(vs, out, cap)

    # -- calculus ----------------------------------------------------------

    def diff(self, v: Var) -> TruncatedSeries:
        """Formal partial derivative with respect to ``v``."""
        if v not in self.vars:
            return TruncatedSeries.zero(self.vars)
        i = self.vars.index(v)
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            if e[i] == 0:
                continue
            key = e[:i] + (e[i] - 1,) + e[i + 1:]
            out[key] = out.get(key, 0.0) + c * e[i]
        cap = list(self.degree_cap)
        cap[i] = max(cap[i] - 1, 0)
        return TruncatedSeries(self.vars, out, tuple(cap))

    def integrate_unit(self, v: Var) -> TruncatedSeries:
        """Definite integral over v in [0, 1]; v is removed from the series."""
        if v not in self.vars:
            return self
        i = self.vars.index(v)
        new_vars = self.vars[:i] + self.vars[i + 1:]
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            key = e[:i] + e[i + 1:]
            out[key] = out.get(key, 0.0) + c / (e[i] + 1)
        cap = self.degree_cap[:i] + self.degree_cap[i + 1:]
        return TruncatedSeries(new_vars, out, cap)

    def substitute_diag(self) -> TruncatedSeries:
        """Set xi = x: exponents of x and xi merge."""
        if Var.XI not in self.vars:
            return self
        i = self.vars.index(Var.XI)
        new_vars = _canonical_vars(set(self.vars) - {Var.XI} | {Var.X})
        xi_pos = i
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            exps = {v: e[j] for j, v in enumerate(self.vars) if j != xi_pos}
            exps[Var.X] = exps.get(Var.X, 0) + e[xi_pos]
            key = tuple(exps.get(v, 0) for v in new_vars)
            out[key] = out.get(key, 0.0) + c
        return TruncatedSeries(new_vars, out)

    def rename(self, src: Var, dst: Var) -> TruncatedSeries:
        """Substitute variable ``src`` by ``dst`` (exponents merge if present)."""
        if src not in self.vars or src == dst:
            return self
        new_vars = _canonical_vars(set(self.vars) - {src} | {dst})
        si = self.vars.index(src)
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            exps = {v: e[j] for j, v in enumerate(self.vars) if j != si}
            exps[dst] = exps.get(dst, 0) + e[si]
            key = tuple(exps.get(v, 0) for v in new_vars)
            out[key] = out.get(key, 0.0) + c
        return TruncatedSeries(new_vars, out)

    def substitute_value(self, v: Var, value: float) -> TruncatedSeries:
        """Fix variable ``v`` at a numeric value."""
        if v not in self.vars:
            return self
        i = self.vars.index(v)
        new_vars = self.vars[:i] + self.vars[i + 1:]
        out: dict[tuple[int, ...], float] = {}
        for e, c in self.coeffs.items():
            w = c * (value ** e[i] if e[i] else 1.0)
            key = e[:i] + e[i + 1:]
            out[key] = out.get(key, 0.0) + w
        return TruncatedSeries(new_vars, out)

    def truncate_total(self, order: int) -> TruncatedSeries:
        """Drop every monomial of total degree above ``order``."""
        out = {e: c for e, c in self.coeffs.items() if sum(e) <= order}
        cap = tuple(min(ci, order) for ci in self.degree_cap)
        return TruncatedSeries(self.vars, out, cap)

    # -- evaluation --------------------------------------------------------

    def eval(self, point: Mapping[Var, float]) -> float:
        """Evaluate at a single point by nested Horner recursion."""
        for v in self.vars:
            if v not in point:
                raise KeyError(f"no value supplied for variable {v.value}")
        return self._horner(self.vars, self.coeffs, point)

    @staticmethod
    def _horner(vars_, coeffs, point) -> float:
        if not vars_:
            return coeffs.get((), 0.0)
        groups: dict[int, dict] = {}
        for e, c in coeffs.items():
            groups.setdefault(e[0], {})[e[1:]] = c
        t = point[vars_[0]]
        acc = 0.0
        prev = None
        for p in sorted(groups, reverse=True):
            inner = TruncatedSeries._horner(vars_[1:], groups[p], point)
            if prev is None:
                acc = inner
            else:
                acc = acc * t ** (prev - p) + inner
            prev = p
        if prev is None:
            return 0.0
        return acc * t ** prev

    def eval_grid(self, grids: Mapping[Var, np.ndarray]) -> np.ndarray:
        """Evaluate on an outer-product grid.

        ``grids`` assigns a 1-D array to every variable of the series; the
        result has one axis per variable, in the series' variable order.
        """
        axes = [np.asarray(grids[v], dtype=float) for v in self.vars]
        shape = tuple(len(a) for a in axes)
        out = np.zeros(shape)
        if not self.coeffs:
            return out
        pows = [
            {p: a ** p for p in sorted({e[i] for e in self.coeffs})}
            for i, a in enumerate(axes)
        ]
        for e, c in self.coeffs.items():
            term = np.asarray(c)
            for i, p in enumerate(e):
                vec = pows[i][p]
                term = np.multiply.outer(term, vec)
            out += term
        return out

    def eval_arrays(self, point: Mapping[Var, np.ndarray]) -> np.ndarray:
        """Evaluate with broadcast arrays (all arrays share one shape)."""
        if not self.coeffs:
            arrays = [np.asarray(point[v], dtype=float) for v in self.vars if v in point]
            return np.zeros(np.broadcast(*arrays).shape if arrays else ())
        out = None
        for e, c in self.coeffs.items():
            term = c
            for v, p in zip(self.vars, e):
                if p:
                    term = term * np.asarray(point[v], dtype=float) ** p
                else:
                    term = term * np.ones_like(np.asarray(point[v], dtype=float))
            out = term if out is None else out + term
        return np.asarray(out)


# ---------------------------------------------------------------------------
# Analytic factors: closed-form Taylor coefficients to any order.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticFactor:
    """One univariate analytic building block of a separable parameter."""

    var: Var

    def taylor_coeffs(self, order: int) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t):
        raise NotImplementedError

    def derivative(self) -> list[tuple[float, "AnalyticFactor"]]:
        """Return the derivative as a list of (scale, factor) summands."""
        raise NotImplementedError

    def taylor(self, order: int) -> TruncatedSeries:
        cs = self.taylor_coeffs(order)
        return TruncatedSeries(
            (self.var,), {(k,): float(c) for k, c in enumerate(cs)}, (order,)
        )


@dataclass(frozen=True)
class Polynomial(AnalyticFactor):
    coeffs: tuple[float, ...] = ()

    def __init__(self, var: Var, coeffs):
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "coeffs", tuple(float(c) for c in coeffs))

    def taylor_coeffs(self, order: int) -> np.ndarray:
        out = np.zeros(order + 1)
        upto = min(order + 1, len(self.coeffs))
        out[:upto] = self.coeffs[:upto]
        return out

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for c in reversed(self.coeffs):
            out = out * t + c
        return out

    def derivative(self):
        if len(self.coeffs) <= 1:
            return []
        d = tuple(k * c for k, c in enumerate(self.coeffs))[1:]
        return [(1.0, Polynomial(self.var, d))]


@dataclass(frozen=True)
class Exp(AnalyticFactor):
    rate: float = 1.0

    def taylor_coeffs(self, order: int) -> np.ndarray:
        out = np.empty(order + 1)
        out[0] = 1.0
        for k in range(1, order + 1):
            out[k] = out[k - 1] * self.rate / k
        return out

    def __call__(self, t):
        return np.exp(self.rate * np.asarray(t, dtype=float))

    def derivative(self):
        return [(self.rate, self)]


@dataclass(frozen=True)
class Cos(AnalyticFactor):
    angular: float = 1.0
    phase: float = 0.0

    def taylor_coeffs(self, order: int) -> np.ndarray:
        k = np.arange(order + 1)
        return (self.angular ** k) * np.cos(self.phase + k * math.pi / 2) / \
            np.array([math.factorial(int(i)) for i in k], dtype=float)

    def __call__(self, t):
        return np.cos(self.angular * np.asarray(t, dtype=float) + self.phase)

    def derivative(self):
        return [(-self.angular, Sin(self.var, self.angular, self.phase))]


@dataclass(frozen=True)
class Sin(AnalyticFactor):
    angular: float = 1.0
    phase: float = 0.0

    def taylor_coeffs(self, order: int) -> np.ndarray:
        k = np.arange(order + 1)
        return (self.angular ** k) * np.sin(self.phase + k * math.pi / 2) / \
            np.array([math.factorial(int(i)) for i in k], dtype=float)

    def __call__(self, t):
        return np.sin(self.angular * np.asarray(t, dtype=float) + self.phase)

    def derivative(self):
        return [(self.angular, Cos(self.var, self.angular, self.phase))]


@dataclass(frozen=True)
class Constant(AnalyticFactor):
    value: float = 1.0

    def taylor_coeffs(self, order: int) -> np.ndarray:
        out = np.zeros(order + 1)
        out[0] = self.value
        return out

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.value)

    def derivative(self):
        return []


def taylor(factor: AnalyticFactor, order: int) -> TruncatedSeries:
    """Maclaurin expansion of an analytic factor up to ``order``."""
    if order < 0:
        raise ValueError("order must be non-negative")
    return factor.taylor(order)


# ---------------------------------------------------------------------------
# Separable terms and sums of them: the parameter representation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparableTerm:
    """scale * product of analytic factors.

    Several factors may share a variable (e.g. a polynomial times an
    exponential in x); their product is taken. Taylor expansion of such a
    term to a given order stays exact because degrees only add.
    """

    scale: float
    factors: tuple[AnalyticFactor, ...]

    def __init__(self, scale: float, factors: Iterable[AnalyticFactor]):
        object.__setattr__(self, "scale", float(scale))
        fs = tuple(sorted(factors, key=lambda f: (_VAR_RANK[f.var], repr(f))))
        object.__setattr__(self, "factors", fs)

    def vars(self) -> tuple[Var, ...]:
        return _canonical_vars(f.var for f in self.factors)

    def taylor(self, order: int) -> TruncatedSeries:
        out = TruncatedSeries.constant(self.scale)
        for f in self.factors:
            out = out * f.taylor(order)
        return out

    def __call__(self, point: Mapping[Var, np.ndarray]) -> np.ndarray:
        out = None
        for f in self.factors:
            val = f(point[f.var])
            out = val if out is None else out * val
        if out is None:
            shapes = [np.asarray(a) for a in point.values()]
            out = np.ones(np.broadcast(*shapes).shape if shapes else ())
        return self.scale * out

    def diff(self, v: Var) -> list["SeparableTerm"]:
        out: list[SeparableTerm] = []
        for i, f in enumerate(self.factors):
            if f.var != v:
                continue
            for s, df in f.derivative():
                rest = self.factors[:i] + (df,) + self.factors[i + 1:]
                out.append(SeparableTerm(self.scale * s, rest))
        return out

    def substitute(self, v: Var, value: float) -> "SeparableTerm":
        scale = self.scale
        rest = []
        for f in self.factors:
            if f.var == v:
                scale *= float(f(value))
            else:
                rest.append(f)
        return SeparableTerm(scale, rest)


@dataclass(frozen=True)
class SeparableSum:
    """A parameter: finite sum of separable terms over fixed variables."""

    terms: tuple[SeparableTerm, ...]

    def __init__(self, terms: Iterable[SeparableTerm]):
        object.__setattr__(self, "terms", tuple(terms))

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(c: float) -> "SeparableSum":
        return SeparableSum([SeparableTerm(c, [])])

    @staticmethod
    def poly(var: Var, coeffs) -> "SeparableSum":
        return SeparableSum([SeparableTerm(1.0, [Polynomial(var, coeffs)])])

    @staticmethod
    def zero() -> "SeparableSum":
        return SeparableSum([])

    # -- structure ---------------------------------------------------------

    def vars(self) -> tuple[Var, ...]:
        return _canonical_vars(v for t in self.terms for v in t.vars())

    def is_zero(self) -> bool:
        return all(t.scale == 0.0 for t in self.terms)

    def is_polynomial(self) -> bool:
        return all(
            isinstance(f, (Polynomial, Constant))
            for t in self.terms
            for f in t.factors
        )

    def poly_degree_in(self, v: Var) -> int | None:
        """Exact degree in ``v`` if polynomial in ``v``, else None."""
        deg = 0
        for t in self.terms:
            d = 0
            for f in t.factors:
                if f.var != v:
                    continue
                if isinstance(f, Constant):
                    continue
                if isinstance(f, Polynomial):
                    nz = [k for k, c in enumerate(f.coeffs) if c != 0.0]
                    d += max(nz) if nz else 0
                else:
                    return None
            deg = max(deg, d)
        return deg

    # -- algebra -----------------------------------------------------------

    def __add__(self, other: "SeparableSum") -> "SeparableSum":
        return SeparableSum(self.terms + other.terms)

    def scale(self, s: float) -> "SeparableSum":
        return SeparableSum([SeparableTerm(t.scale * s, t.factors) for t in self.terms])

    def diff(self, v: Var) -> "SeparableSum":
        return SeparableSum([d for t in self.terms for d in t.diff(v)])

    def substitute(self, v: Var, value: float) -> "SeparableSum":
        return SeparableSum([t.substitute(v, value) for t in self.terms])

    def taylor(self, order: int, total: bool = True) -> TruncatedSeries:
        """Expand every term to ``order``; with ``total`` the result keeps
        only monomials of total degree <= order."""
        out = TruncatedSeries.zero(self.vars())
        for t in self.terms:
            out = out + t.taylor(order)
        return out.truncate_total(order) if total else out

    def __call__(self, point: Mapping[Var, np.ndarray]) -> np.ndarray:
        out = None
        for t in self.terms:
            val = t(point)
            out = val if out is None else out + val
        if out is None:
            shapes = [np.asarray(a) for a in point.values()]
            out = np.zeros(np.broadcast(*shapes).shape if shapes else ())
        return np.asarray(out)

    def eval1(self, v: Var, t) -> np.ndarray:
        """Shorthand for univariate evaluation."""
        return self({v: np.asarray(t, dtype=float)})
