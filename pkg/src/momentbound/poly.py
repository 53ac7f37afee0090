"""Sparse real polynomials in time ``t`` and states ``x1..xn``.

Monomials are ordered graded-lexicographically over ``(t, x1, ..., xn)``:
lower total degree first, and within one degree the larger exponent of the
earlier variable first.  With two states and no time this gives
``1, x1, x2, x1^2, x1*x2, x2^2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

__all__ = [
    "Monomial",
    "Polynomial",
    "MonomialOrdering",
    "PolynomialParseError",
    "lie_derivative",
    "monomial_basis",
    "parse_polynomial",
    "format_polynomial",
    "default_names",
]


@dataclass(frozen=True, slots=True)
class Monomial:
    t_exp: int
    x_exps: tuple[int, ...]
    degree: int = field(init=False, compare=False)

    def __post_init__(self) -> None:
        x_exps = tuple(int(e) for e in self.x_exps)
        if self.t_exp < 0 or any(e < 0 for e in x_exps):
            raise ValueError(f"negative exponent in monomial {self.t_exp}, {x_exps}")
        object.__setattr__(self, "x_exps", x_exps)
        object.__setattr__(self, "degree", int(self.t_exp) + sum(x_exps))

    @classmethod
    def one(cls, n_x: int) -> Monomial:
        return cls(0, (0,) * n_x)

    @classmethod
    def state(cls, i: int, n_x: int, power: int = 1) -> Monomial:
        exps = [0] * n_x
        exps[i] = power
        return cls(0, tuple(exps))

    @property
    def n_x(self) -> int:
        return len(self.x_exps)

    @property
    def x_degree(self) -> int:
        return self.degree - self.t_exp

    def __mul__(self, other: Monomial) -> Monomial:
        if other.n_x != self.n_x:
            raise ValueError(f"state dimension mismatch: {self.n_x} vs {other.n_x}")
        return Monomial(self.t_exp + other.t_exp,
                        tuple(a + b for a, b in zip(self.x_exps, other.x_exps)))

    def sort_key(self) -> tuple:
        return (self.degree, tuple(-e for e in (self.t_exp, *self.x_exps)))

    def __lt__(self, other: Monomial) -> bool:
        return self.sort_key() < other.sort_key()

    def evaluate(self, t: float, x: Sequence[float]) -> float:
        value = float(t) ** self.t_exp if self.t_exp else 1.0
        for xi, e in zip(x, self.x_exps):
            if e:
                value *= float(xi) ** e
        return value

    def label(self, names: Sequence[str] | None = None, time_name: str = "t") -> str:
        names = names or default_names(self.n_x)
        parts = []
        for name, e in zip((time_name, *names), (self.t_exp, *self.x_exps)):
            if e == 1:
                parts.append(name)
            elif e > 1:
                parts.append(f"{name}^{e}")
        return "*".join(parts) if parts else "1"

    def __repr__(self) -> str:
        return f"Monomial({self.label()})"


def default_names(n_x: int) -> tuple[str, ...]:
    return tuple(f"x{i + 1}" for i in range(n_x))


class Polynomial:
    """Immutable sparse polynomial with float coefficients.

    Zero coefficients are never stored, so two polynomials are equal exactly
    when their term maps are equal.
    """

    __slots__ = ("_terms", "_n_x", "_hash")

    def __init__(self, terms: Mapping[Monomial, float] | Iterable[tuple[Monomial, float]], n_x: int):
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict[Monomial, float] = {}
        for mono, coef in items:
            if mono.n_x != n_x:
                raise ValueError(f"monomial {mono} does not have {n_x} states")
            acc[mono] = acc.get(mono, 0.0) + float(coef)
        self._terms = MappingProxyType(
            {m: acc[m] for m in sorted(acc) if acc[m] != 0.0})
        self._n_x = n_x
        self._hash: int | None = None

    # construction helpers
    @classmethod
    def zero(cls, n_x: int) -> Polynomial:
        return cls({}, n_x)

    @classmethod
    def constant(cls, value: float, n_x: int) -> Polynomial:
        return cls({Monomial.one(n_x): value}, n_x)

    @classmethod
    def state(cls, i: int, n_x: int) -> Polynomial:
        return cls({Monomial.state(i, n_x): 1.0}, n_x)

    @classmethod
    def time(cls, n_x: int) -> Polynomial:
        return cls({Monomial(1, (0,) * n_x): 1.0}, n_x)

    @classmethod
    def monomial(cls, mono: Monomial, coef: float = 1.0) -> Polynomial:
        return cls({mono: coef}, mono.n_x)

    @property
    def terms(self) -> Mapping[Monomial, float]:
        return self._terms

    @property
    def n_x(self) -> int:
        return self._n_x

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((m.degree for m in self._terms), default=-1)

    def is_zero(self) -> bool:
        return not self._terms

    def depends_on_time(self) -> bool:
        return any(m.t_exp for m in self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            if other.n_x != self._n_x:
                raise ValueError(f"state dimension mismatch: {self._n_x} vs {other.n_x}")
            return other
        if isinstance(other, (int, float)):
            return Polynomial.constant(float(other), self._n_x)
        return NotImplemented

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return Polynomial([*self._terms.items(), *other.terms.items()], self._n_x)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return self.scale(-1.0)

    def __sub__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other) -> Polynomial:
        return (-self) + other

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, (int, float)):
            return self.scale(other)
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        products = ((ma * mb, ca * cb)
                    for ma, ca in self._terms.items()
                    for mb, cb in other.terms.items())
        return Polynomial(products, self._n_x)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> Polynomial:
        if k < 0:
            raise ValueError("negative powers are not polynomials")
        out = Polynomial.constant(1.0, self._n_x)
        for _ in range(k):
            out = out * self
        return out

    def scale(self, alpha: float) -> Polynomial:
        return Polynomial({m: alpha * c for m, c in self._terms.items()}, self._n_x)

    def diff_t(self) -> Polynomial:
        return Polynomial(
            ((Monomial(m.t_exp - 1, m.x_exps), c * m.t_exp)
             for m, c in self._terms.items() if m.t_exp), self._n_x)

    def diff_x(self, i: int) -> Polynomial:
        out = []
        for m, c in self._terms.items():
            e = m.x_exps[i]
            if e:
                exps = list(m.x_exps)
                exps[i] -= 1
                out.append((Monomial(m.t_exp, tuple(exps)), c * e))
        return Polynomial(out, self._n_x)

    def substitute_time(self, t: float) -> Polynomial:
        """Fix ``t`` to a number, leaving a polynomial in ``x`` only."""
        return Polynomial(
            ((Monomial(0, m.x_exps), c * float(t) ** m.t_exp) for m, c in self._terms.items()),
            self._n_x)

    def __call__(self, t: float, x: Sequence[float]) -> float:
        return self.eval(t, x)

    def eval(self, t: float, x: Sequence[float]) -> float:
        if len(x) != self._n_x:
            raise ValueError(f"point has {len(x)} coordinates, expected {self._n_x}")
        return math.fsum(c * m.evaluate(t, x) for m, c in self._terms.items())

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(float(other), self._n_x)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._n_x == other.n_x and dict(self._terms) == dict(other.terms)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self._n_x, frozenset(self._terms.items())))
        return self._hash

    def to_string(self, names: Sequence[str] | None = None, time_name: str = "t") -> str:
        return format_polynomial(self, names, time_name)

    def __str__(self) -> str:
        return self.to_string()

    def __repr__(self) -> str:
        return f"Polynomial({self.to_string()!r}, n_x={self._n_x})"


def lie_derivative(v: Polynomial, f: Sequence[Polynomial]) -> Polynomial:
    """Time derivative of ``v`` along the flow of ``x' = f(t, x)``."""
    if len(f) != v.n_x:
        raise ValueError(f"vector field has {len(f)} components, polynomial has {v.n_x} states")
    out = v.diff_t()
    for i, fi in enumerate(f):
        dv = v.diff_x(i)
        if not dv.is_zero():
            out = out + dv * fi
    return out


def monomial_basis(n_vars: int, max_deg: int, include_t: bool = False) -> list[Monomial]:
    """All monomials of total degree <= ``max_deg`` in graded-lex order.

    ``n_vars`` counts the state variables; ``include_t`` adds time in front.
    """
    if max_deg < 0:
        raise ValueError("max_deg must be nonnegative")
    width = n_vars + (1 if include_t else 0)
    out = []
    for deg in range(max_deg + 1):
        # combinations of variable indices in increasing order enumerate
        # exponent vectors with larger leading exponents first
        for combo in combinations_with_replacement(range(width), deg):
            exps = [0] * width
            for v in combo:
                exps[v] += 1
            if include_t:
                out.append(Monomial(exps[0], tuple(exps[1:])))
            else:
                out.append(Monomial(0, tuple(exps)))
    return out


class MonomialOrdering:
    """Index map between monomials of degree <= cap and ``0..len-1``."""

    def __init__(self, n_x: int, cap: int, include_t: bool = False):
        self.n_x = n_x
        self.cap = cap
        self.include_t = include_t
        self.monomials = monomial_basis(n_x, cap, include_t)
        self._index = {m: i for i, m in enumerate(self.monomials)}

    def __len__(self) -> int:
        return len(self.monomials)

    def __contains__(self, mono: Monomial) -> bool:
        return mono in self._index

    def index(self, mono: Monomial) -> int:
        try:
            return self._index[mono]
        except KeyError:
            raise KeyError(f"{mono} is outside the degree-{self.cap} basis") from None

    def __getitem__(self, i: int) -> Monomial:
        return self.monomials[i]


def _format_coef(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


def format_polynomial(p: Polynomial, names: Sequence[str] | None = None, time_name: str = "t") -> str:
    """Print in graded-lex term order; ``parse_polynomial`` reads it back exactly."""
    if p.is_zero():
        return "0"
    names = names or default_names(p.n_x)
    pieces = []
    for mono, c in p.terms.items():
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        body = mono.label(names, time_name)
        if body == "1":
            text = _format_coef(mag)
        elif mag == 1.0:
            text = body
        else:
            text = f"{_format_coef(mag)}*{body}"
        pieces.append((sign, text))
    first_sign, first = pieces[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, text in pieces[1:]:
        out += f" {sign} {text}"
    return out


class PolynomialParseError(ValueError):
    def __init__(self, message: str, position: int, text: str):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.position = position
        self.text = text


_TOKEN = re.compile(r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
                    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*^()]))")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolynomialParseError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    # expr   := ['-'|'+'] term (('+'|'-') term)*
    # term   := factor ('*' factor)*
    # factor := atom ['^' integer]
    # atom   := number | name | '(' expr ')'

    def __init__(self, text: str, names: Sequence[str], time_name: str | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.n_x = len(names)
        self.vars = {name: k for k, name in enumerate(names)}
        if time_name is not None and time_name in self.vars:
            raise ValueError(f"state name {time_name!r} collides with the time variable")
        self.time_name = time_name

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message: str, tok=None):
        tok = tok or self.peek()
        raise PolynomialParseError(message, tok[2], self.text)

    def parse(self) -> Polynomial:
        if self.peek()[0] == "end":
            self.fail("empty expression")
        out = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return out

    def expr(self) -> Polynomial:
        sign = 1.0
        if self.peek()[1] in "+-" and self.peek()[0] == "op":
            sign = -1.0 if self.take()[1] == "-" else 1.0
        out = self.term().scale(sign)
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self) -> Polynomial:
        out = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] == "*":
            self.take()
            out = out * self.factor()
        return out

    def factor(self) -> Polynomial:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            tok = self.take()
            if tok[0] != "num" or not tok[1].isdigit():
                self.fail("exponent must be a nonnegative integer", tok)
            return base ** int(tok[1])
        return base

    def atom(self) -> Polynomial:
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Polynomial.constant(float(text), self.n_x)
        if kind == "name":
            if text in self.vars:
                return Polynomial.state(self.vars[text], self.n_x)
            if text == self.time_name:
                return Polynomial.time(self.n_x)
            self.fail(f"unknown variable {text!r}", tok)
        if kind == "op" and text == "(":
            inner = self.expr()
            close = self.take()
            if close[1] != ")":
                self.fail("expected ')'", close)
            return inner
        if kind == "end":
            self.fail("unexpected end of expression", tok)
        self.fail(f"unexpected token {text!r}", tok)


def parse_polynomial(text: str, names: Sequence[str], time_name: str | None = "t") -> Polynomial:
    """Parse ``text`` over state ``names`` (and ``t`` unless ``time_name`` is None)."""
    return _Parser(text, tuple(names), time_name).parse()
