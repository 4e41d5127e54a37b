"""Exact scalar calculus on R^3 for polynomials and exponentials of polynomials.

Every field is kept in a normal form

    f = sum_k P_k(x, y, z) * exp(2 * Q_k(x, y, z))

with pairwise distinct exponent polynomials ``Q_k`` (``Q = 0`` is the purely
polynomial part) and nonzero coefficient polynomials ``P_k``.  The class is
closed under sums, products and partial derivatives, and two fields in normal
form are pointwise equal iff they are structurally equal.
"""
from __future__ import annotations

import functools
import math
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

import numpy as np

Exponent = tuple[int, int, int]
AXES = {"x": 0, "y": 1, "z": 2}


def _axis_index(axis: int | str) -> int:
    if isinstance(axis, str):
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis!r}")
    return axis


class Poly3:
    """Real polynomial in (x, y, z) stored as {(i, j, k): coefficient}."""

    __slots__ = ("_terms", "_key")

    def __init__(self, terms: Mapping[Exponent, float] | None = None):
        clean: dict[Exponent, float] = {}
        for exp, c in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != 3 or min(exp) < 0:
                raise ValueError(f"bad exponent triple {exp!r}")
            c = float(c)
            if not math.isfinite(c):
                raise ValueError("coefficients must be finite")
            if c != 0.0:
                clean[exp] = clean.get(exp, 0.0) + c
        self._terms = {e: c for e, c in sorted(clean.items()) if c != 0.0}
        self._key = tuple(self._terms.items())

    @classmethod
    def const(cls, c: float) -> Poly3:
        return cls({(0, 0, 0): c})

    @classmethod
    def var(cls, axis: int | str) -> Poly3:
        e = [0, 0, 0]
        e[_axis_index(axis)] = 1
        return cls({tuple(e): 1.0})

    @property
    def terms(self) -> dict[Exponent, float]:
        return dict(self._terms)

    def items(self) -> Iterator[tuple[Exponent, float]]:
        return iter(self._key)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(e == (0, 0, 0) for e in self._terms)

    def constant_value(self) -> float:
        return self._terms.get((0, 0, 0), 0.0)

    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=0)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Poly3) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return f"Poly3({self._terms!r})"

    def __add__(self, other: Poly3 | float) -> Poly3:
        other = _as_poly(other)
        out = dict(self._terms)
        for e, c in other._terms.items():
            out[e] = out.get(e, 0.0) + c
        return Poly3(out)

    __radd__ = __add__

    def __neg__(self) -> Poly3:
        return Poly3({e: -c for e, c in self._terms.items()})

    def __sub__(self, other: Poly3 | float) -> Poly3:
        return self + (-_as_poly(other))

    def __rsub__(self, other: float) -> Poly3:
        return _as_poly(other) - self

    def __mul__(self, other: Poly3 | float) -> Poly3:
        other = _as_poly(other)
        out: dict[Exponent, float] = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2])
                out[e] = out.get(e, 0.0) + c1 * c2
        return Poly3(out)

    __rmul__ = __mul__

    def __pow__(self, n: int) -> Poly3:
        if n < 0:
            raise ValueError("negative powers are outside the field class")
        out = Poly3.const(1.0)
        for _ in range(n):
            out = out * self
        return out

    def partial(self, axis: int | str) -> Poly3:
        a = _axis_index(axis)
        out: dict[Exponent, float] = {}
        for e, c in self._terms.items():
            if e[a]:
                d = list(e)
                d[a] -= 1
                out[tuple(d)] = out.get(tuple(d), 0.0) + c * e[a]
        return Poly3(out)

    def __call__(self, x, y, z):
        return _evaluate(_compile(ScalarField.poly(self)._key), x, y, z)

    def source(self) -> str:
        """Straight-line Python expression in ``x, y, z``."""
        if not self._terms:
            return "0.0"
        return " + ".join(f"{c!r}" + "".join(f"*{v}" * n for v, n in zip("xyz", e))
                          for e, c in self._terms.items())


@functools.lru_cache(maxsize=4096)
def _compile(key):
    # key: tuple of (Q, P) pairs of one ScalarField in normal form
    return eval(f"lambda x, y, z: {_body(key)}", {"exp": np.exp})


def _body(key) -> str:
    parts = []
    for q, p in key:
        term = f"({p.source()})"
        if not q.is_zero():
            term += f"*exp(2.0*({q.source()}))"
        parts.append(term)
    return " + ".join(parts) or "0.0"


@functools.lru_cache(maxsize=1024)
def _compile_stack(keys):
    lines = ["def f(q):", "    x, y, z = q[..., 0], q[..., 1], q[..., 2]",
             f"    out = empty(q.shape[:-1] + ({len(keys)},))"]
    lines += [f"    out[..., {i}] = {_body(k)}" for i, k in enumerate(keys)]
    lines.append("    return out")
    scope = {"exp": np.exp, "empty": np.empty}
    exec("\n".join(lines), scope)
    return scope["f"]


def evaluate_stack(fields, q) -> np.ndarray:
    """Evaluate several fields at points ``q`` (..., 3); result has shape (..., len(fields))."""
    fn = _compile_stack(tuple(as_field(f)._key for f in fields))
    return fn(np.asarray(q, float))


def _evaluate(fn, x, y, z):
    x, y, z = np.asarray(x, float), np.asarray(y, float), np.asarray(z, float)
    out = fn(x, y, z)
    shape = np.broadcast_shapes(x.shape, y.shape, z.shape)
    if np.shape(out) != shape:
        out = np.broadcast_to(out, shape) * 1.0
    return np.asarray(out, float)[()]


def _as_poly(value: Poly3 | float) -> Poly3:
    if isinstance(value, Poly3):
        return value
    return Poly3.const(float(value))


class ScalarField:
    """Finite sum of ``P * exp(2 Q)`` terms in normal form (see module doc)."""

    __slots__ = ("_groups", "_key")

    def __init__(self, groups: Mapping[Poly3, Poly3] | None = None):
        merged: dict[Poly3, Poly3] = {}
        for q, p in (groups or {}).items():
            merged[q] = merged.get(q, Poly3()) + p
        kept = [(q, p) for q, p in merged.items() if not p.is_zero()]
        kept.sort(key=lambda qp: (qp[0].degree(), qp[0]._key))
        self._groups = dict(kept)
        self._key = tuple(kept)

    # constructors -------------------------------------------------------
    @classmethod
    def poly(cls, p: Poly3 | float) -> ScalarField:
        return cls({Poly3(): _as_poly(p)})

    @classmethod
    def exp2(cls, q: Poly3 | ScalarField) -> ScalarField:
        """``exp(2 q)`` for a polynomial ``q``."""
        if isinstance(q, ScalarField):
            q = q.as_poly()
        return cls({q: Poly3.const(1.0)})

    @classmethod
    def const(cls, c: float) -> ScalarField:
        return cls.poly(Poly3.const(c))

    @classmethod
    def var(cls, axis: int | str) -> ScalarField:
        return cls.poly(Poly3.var(axis))

    # structure ----------------------------------------------------------
    @property
    def groups(self) -> dict[Poly3, Poly3]:
        """Mapping exponent polynomial Q -> coefficient polynomial P."""
        return dict(self._groups)

    def is_zero(self) -> bool:
        return not self._groups

    def is_polynomial(self) -> bool:
        return all(q.is_zero() for q in self._groups)

    def as_poly(self) -> Poly3:
        if not self.is_polynomial():
            raise ValueError("field has exponential terms; not a polynomial")
        return self._groups.get(Poly3(), Poly3())

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, float, Poly3)):
            other = ScalarField.poly(other)
        return isinstance(other, ScalarField) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return f"ScalarField({render(self)})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other) -> ScalarField:
        other = as_field(other)
        out = dict(self._groups)
        for q, p in other._groups.items():
            out[q] = out.get(q, Poly3()) + p
        return ScalarField(out)

    __radd__ = __add__

    def __neg__(self) -> ScalarField:
        return ScalarField({q: -p for q, p in self._groups.items()})

    def __sub__(self, other) -> ScalarField:
        return self + (-as_field(other))

    def __rsub__(self, other) -> ScalarField:
        return as_field(other) - self

    def __mul__(self, other) -> ScalarField:
        other = as_field(other)
        out: dict[Poly3, Poly3] = {}
        for q1, p1 in self._groups.items():
            for q2, p2 in other._groups.items():
                q = q1 + q2
                out[q] = out.get(q, Poly3()) + p1 * p2
        return ScalarField(out)

    __rmul__ = __mul__

    def __pow__(self, n: int) -> ScalarField:
        if n < 0:
            raise ValueError("negative powers are outside the field class")
        out = ScalarField.const(1.0)
        for _ in range(n):
            out = out * self
        return out

    # calculus -----------------------------------------------------------
    def partial(self, axis: int | str) -> ScalarField:
        # d(P e^{2Q}) = (dP + 2 P dQ) e^{2Q}
        out: dict[Poly3, Poly3] = {}
        for q, p in self._groups.items():
            out[q] = p.partial(axis) + 2.0 * p * q.partial(axis)
        return ScalarField(out)

    def gradient(self) -> tuple[ScalarField, ScalarField, ScalarField]:
        return tuple(self.partial(a) for a in range(3))

    def hessian(self) -> list[list[ScalarField]]:
        g = self.gradient()
        return [[g[i].partial(j) for j in range(3)] for i in range(3)]

    def __call__(self, x, y, z):
        return _evaluate(_compile(self._key), x, y, z)

    def at(self, q) -> float | np.ndarray:
        """Evaluate at points ``q`` of shape (..., 3)."""
        q = np.asarray(q, float)
        return self(q[..., 0], q[..., 1], q[..., 2])


def as_field(value) -> ScalarField:
    if isinstance(value, ScalarField):
        return value
    if isinstance(value, Poly3):
        return ScalarField.poly(value)
    return ScalarField.const(float(value))


def eval_field(f: ScalarField, q) -> float | np.ndarray:
    return f.at(q)


def partial(f: ScalarField, axis: int | str) -> ScalarField:
    return f.partial(axis)


X, Y, Z = (ScalarField.var(a) for a in "xyz")
exp2 = ScalarField.exp2


# ---------------------------------------------------------------------------
# prefix text grammar:  expr := number | x | y | z | (op expr ...)
#   op in {+, *, ^, exp2};  (^ expr n) takes a non-negative integer n;
#   numbers are decimals or rationals a/b.

class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.reason = message
        self.position = position


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def _number(tok: str) -> float | None:
    try:
        if "/" in tok:
            return float(Fraction(tok))
        return float(tok)
    except (ValueError, ZeroDivisionError):
        return None


def parse(text: str) -> ScalarField:
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression", 0)
    field, pos = _parse_expr(tokens, 0, len(text))
    if pos != len(tokens):
        raise ParseError(f"unexpected token {tokens[pos][0]!r}", tokens[pos][1])
    return field


def _parse_expr(tokens, pos, end) -> tuple[ScalarField, int]:
    if pos >= len(tokens):
        raise ParseError("unexpected end of input", end)
    tok, at = tokens[pos]
    if tok == ")":
        raise ParseError("unexpected ')'", at)
    if tok != "(":
        if tok in AXES:
            return ScalarField.var(tok), pos + 1
        value = _number(tok)
        if value is None:
            raise ParseError(f"unknown symbol {tok!r}", at)
        return ScalarField.const(value), pos + 1
    if pos + 1 >= len(tokens):
        raise ParseError("unexpected end of input", end)
    op, op_at = tokens[pos + 1]
    pos += 2
    args: list[ScalarField] = []
    raw: list[str] = []
    while True:
        if pos >= len(tokens):
            raise ParseError("missing ')'", end)
        if tokens[pos][0] == ")":
            pos += 1
            break
        raw.append(tokens[pos][0])
        arg, pos = _parse_expr(tokens, pos, end)
        args.append(arg)
    if op == "+":
        return sum(args, ScalarField()), pos
    if op == "*":
        out = ScalarField.const(1.0)
        for a in args:
            out = out * a
        return out, pos
    if op == "^":
        if len(args) != 2 or not raw[1].isdigit():
            raise ParseError("'^' takes an expression and a non-negative integer", op_at)
        return args[0] ** int(raw[1]), pos
    if op == "exp2":
        if len(args) != 1 or not args[0].is_polynomial():
            raise ParseError("'exp2' takes exactly one polynomial argument", op_at)
        return ScalarField.exp2(args[0].as_poly()), pos
    raise ParseError(f"unknown operator {op!r}", op_at)


def _render_number(c: float) -> str:
    return repr(float(c))


def _render_monomial(e: Exponent, c: float) -> str:
    factors = []
    for name, n in zip("xyz", e):
        if n == 1:
            factors.append(name)
        elif n > 1:
            factors.append(f"(^ {name} {n})")
    if not factors:
        return _render_number(c)
    if c == 1.0 and len(factors) == 1:
        return factors[0]
    return "(* " + " ".join([_render_number(c)] + factors) + ")"


def _render_poly(p: Poly3) -> str:
    parts = [_render_monomial(e, c) for e, c in p.items()]
    if not parts:
        return "0.0"
    if len(parts) == 1:
        return parts[0]
    return "(+ " + " ".join(parts) + ")"


def render(f: ScalarField) -> str:
    """Normalized prefix text; ``parse(render(f)) == f``."""
    parts = []
    for q, p in f._groups.items():
        if q.is_zero():
            parts.append(_render_poly(p))
        elif p == Poly3.const(1.0):
            parts.append(f"(exp2 {_render_poly(q)})")
        else:
            parts.append(f"(* {_render_poly(p)} (exp2 {_render_poly(q)}))")
    if not parts:
        return "0.0"
    if len(parts) == 1:
        return parts[0]
    return "(+ " + " ".join(parts) + ")"


def monomials(fields: Iterable[ScalarField]) -> set[Exponent]:
    out: set[Exponent] = set()
    for f in fields:
        for p in f.groups.values():
            out.update(p.terms)
    return out
