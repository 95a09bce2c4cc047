"""Symbolic scalar fields over a chart.

Expressions are immutable, hash-consed trees.  Constructors normalize as they
build: sums and products are flattened, constants folded, like terms and
integer powers of a common base merged, and operands sorted by a stable
structural digest.  Building the same expression twice therefore yields the
same object, which lets derivatives and evaluations be memoized per node.

Node kinds: constant, coordinate, sum, product, rational power and the unary
functions sin, cos, exp, log, sqrt, abs.  Subtraction and division are
represented as sums with a -1 coefficient and products with a -1 power.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
import weakref
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Chart", "Point", "ScalarField", "Const", "Var", "Add", "Mul", "Pow", "Fn",
    "ParseError", "UnknownIdentifierError", "ArityError", "DomainError",
    "const", "var", "add", "mul", "power", "fn", "sin", "cos", "exp", "log",
    "sqrt", "absf", "as_field", "parse_scalar_field", "differentiate",
    "evaluate", "evaluate_many", "to_text", "field_matrix", "sym_det",
    "sym_inverse", "matmul", "size", "FUNCTIONS", "evaluate_array",
    "map_fields", "zeros", "as_batch",
]


# ---------------------------------------------------------------------------
# charts and points

@dataclass(frozen=True)
class Chart:
    """Coordinates u = (x^1..x^n, y^{n+1}..y^{n+m}), horizontal first.

    ``params`` are extra symbols (for example ``tau``) that may appear in
    fields but are not coordinates of the manifold.
    """

    n: int
    m: int
    coord_names: tuple[str, ...] = ()
    domain: tuple[tuple[float, float, bool], ...] = ()
    params: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n < 2 or self.m < 1:
            raise ValueError(f"chart needs n >= 2 and m >= 1, got n={self.n}, m={self.m}")
        names = self.coord_names or tuple(
            [f"x{i + 1}" for i in range(self.n)]
            + [f"y{self.n + a + 1}" for a in range(self.m)])
        object.__setattr__(self, "coord_names", tuple(names))
        if len(self.coord_names) != self.n + self.m:
            raise ValueError("coord_names must list n+m names")
        allnames = self.coord_names + tuple(self.params)
        if len(set(allnames)) != len(allnames):
            raise ValueError("coordinate and parameter names must be unique")
        for nm in allnames:
            if not nm.isidentifier() or nm in FUNCTIONS or nm == "pi":
                raise ValueError(f"invalid coordinate name {nm!r}")
        if self.domain:
            if len(self.domain) != self.n + self.m:
                raise ValueError("domain must give one interval per coordinate")
            object.__setattr__(self, "domain", tuple(
                (float(lo), float(hi), bool(per)) for lo, hi, per in self.domain))
        else:
            object.__setattr__(self, "domain", tuple(
                (0.0, 2 * math.pi, True) for _ in range(self.n + self.m)))

    @property
    def dim(self) -> int:
        return self.n + self.m

    @property
    def names(self) -> tuple[str, ...]:
        return self.coord_names + tuple(self.params)

    @property
    def nvars(self) -> int:
        return self.dim + len(self.params)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def with_params(self, *params: str) -> "Chart":
        return Chart(self.n, self.m, self.coord_names, self.domain,
                     tuple(self.params) + tuple(p for p in params if p not in self.params))

    def hslice(self) -> slice:
        return slice(0, self.n)

    def vslice(self) -> slice:
        return slice(self.n, self.n + self.m)


@dataclass(frozen=True)
class Point:
    chart: Chart
    coords: np.ndarray
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(-1)
        if c.size != self.chart.dim:
            raise ValueError(f"point needs {self.chart.dim} coordinates, got {c.size}")
        pr = np.asarray(self.params, dtype=float).reshape(-1)
        if pr.size == 0 and self.chart.params:
            pr = np.zeros(len(self.chart.params))
        if pr.size != len(self.chart.params):
            raise ValueError("wrong number of parameter values")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "params", pr)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.coords, self.params])


# ---------------------------------------------------------------------------
# errors

class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownIdentifierError(ParseError):
    def __init__(self, name: str, line: int, column: int):
        super().__init__(f"unknown identifier {name!r}", line, column)
        self.name = name


class ArityError(ParseError):
    pass


class DomainError(ArithmeticError):
    def __init__(self, message: str, node: "ScalarField", point: np.ndarray | None = None):
        where = "" if point is None else f" at point {np.array2string(np.asarray(point), precision=6)}"
        super().__init__(f"{message} in {_short(node)}{where}")
        self.node = node
        self.point = point


def _short(node: "ScalarField", limit: int = 80) -> str:
    s = to_text(node)
    return s if len(s) <= limit else s[:limit - 3] + "..."


# ---------------------------------------------------------------------------
# node classes

_RANK = {"const": 0, "var": 1, "pow": 2, "fn": 3, "mul": 4, "add": 5}
_intern = weakref.WeakValueDictionary()
_lock = threading.Lock()


def _digest(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(repr(p).encode())
        h.update(b"|")
    return int.from_bytes(h.digest(), "big")


class ScalarField:
    """Base class of expression nodes; do not instantiate directly."""

    __slots__ = ("kind", "payload", "args", "digest", "vars", "nodes",
                 "_dcache", "__weakref__")

    def __init__(self, *a, **k):
        raise TypeError("use the module constructors (const, var, add, ...)")

    @classmethod
    def _make(cls, kind: str, payload, args: tuple):
        key = (kind, payload, tuple(id(a) for a in args))
        with _lock:
            node = _intern.get(key)
            if node is not None:
                return node
            node = object.__new__(cls)
            node.kind = kind
            node.payload = payload
            node.args = args
            pbytes = struct.pack("<d", payload) if kind == "const" else payload
            node.digest = _digest(kind, pbytes, *[a.digest for a in args])
            vs = frozenset()
            for a in args:
                vs = vs | a.vars
            if kind == "var":
                vs = frozenset((payload,))
            node.vars = vs
            node.nodes = 1 + sum(a.nodes for a in args)
            node._dcache = {}
            _intern[key] = node
            return node

    # ordering used for canonical operand order
    def sortkey(self):
        return (_RANK[self.kind], self.digest)

    def __hash__(self):
        return self.digest

    def __eq__(self, other):
        return self is other

    def __repr__(self):
        return f"ScalarField({to_text(self)})"

    def __str__(self):
        return to_text(self)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, as_field(o))

    def __radd__(self, o):
        return add(as_field(o), self)

    def __sub__(self, o):
        return add(self, mul(const(-1.0), as_field(o)))

    def __rsub__(self, o):
        return add(as_field(o), mul(const(-1.0), self))

    def __mul__(self, o):
        return mul(self, as_field(o))

    def __rmul__(self, o):
        return mul(as_field(o), self)

    def __truediv__(self, o):
        return mul(self, power(as_field(o), -1))

    def __rtruediv__(self, o):
        return mul(as_field(o), power(self, -1))

    def __neg__(self):
        return mul(const(-1.0), self)

    def __pow__(self, q):
        if isinstance(q, ScalarField):
            if q.kind == "const":
                return power(self, q.payload)
            return fn("exp", mul(q, fn("log", self)))
        return power(self, q)

    @property
    def is_const(self) -> bool:
        return self.kind == "const"

    @property
    def value(self) -> float:
        if self.kind != "const":
            raise ValueError("not a constant")
        return self.payload


# Aliases used for isinstance checks and documentation.
Const = Var = Add = Mul = Pow = Fn = ScalarField

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1}


def const(v: float) -> ScalarField:
    v = float(v)
    if v == 0.0:
        v = 0.0  # fold -0.0
    if not math.isfinite(v):
        raise ValueError(f"non-finite constant {v}")
    return ScalarField._make("const", v, ())


ZERO = None  # set below
ONE = None


def var(i: int) -> ScalarField:
    if i < 0:
        raise ValueError("coordinate index must be non-negative")
    return ScalarField._make("var", int(i), ())


def as_field(x) -> ScalarField:
    if isinstance(x, ScalarField):
        return x
    if isinstance(x, (int, float, Fraction, np.floating, np.integer)):
        return const(float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to a scalar field")


def _split_coeff(t: ScalarField) -> tuple[float, ScalarField | None]:
    """Split a term into (numeric coefficient, remaining factor or None)."""
    if t.kind == "const":
        return t.payload, None
    if t.kind == "mul" and t.args[0].kind == "const":
        rest = t.args[1:]
        return t.args[0].payload, rest[0] if len(rest) == 1 else ScalarField._make("mul", None, rest)
    return 1.0, t


def add(*terms) -> ScalarField:
    flat: list[ScalarField] = []
    for t in terms:
        t = as_field(t)
        if t.kind == "add":
            flat.extend(t.args)
        else:
            flat.append(t)
    c = 0.0
    coeffs: dict[ScalarField, float] = {}
    for t in flat:
        k, rest = _split_coeff(t)
        if rest is None:
            c += k
        else:
            coeffs[rest] = coeffs.get(rest, 0.0) + k
    out = []
    for rest, k in coeffs.items():
        if k == 0.0:
            continue
        out.append(rest if k == 1.0 else _mul_coeff(k, rest))
    out.sort(key=lambda t: _split_coeff(t)[1].sortkey())
    if c != 0.0:
        out.insert(0, const(c))
    if not out:
        return const(0.0)
    if len(out) == 1:
        return out[0]
    return ScalarField._make("add", None, tuple(out))


def _mul_coeff(k: float, rest: ScalarField) -> ScalarField:
    if rest.kind == "mul":
        return ScalarField._make("mul", None, (const(k),) + rest.args)
    return ScalarField._make("mul", None, (const(k), rest))


def _base_exp(f: ScalarField) -> tuple[ScalarField, Fraction]:
    if f.kind == "pow":
        return f.args[0], f.payload
    return f, Fraction(1)


def mul(*factors) -> ScalarField:
    flat: list[ScalarField] = []
    for f in factors:
        f = as_field(f)
        if f.kind == "mul":
            flat.extend(f.args)
        else:
            flat.append(f)
    c = 1.0
    merged: dict[ScalarField, Fraction] = {}
    loose: list[ScalarField] = []
    for f in flat:
        if f.kind == "const":
            c *= f.payload
            continue
        b, q = _base_exp(f)
        if q.denominator == 1:
            merged[b] = merged.get(b, Fraction(0)) + q
        else:
            loose.append(f)
    if c == 0.0:
        return const(0.0)
    out = []
    for b, q in merged.items():
        if q == 0:
            continue
        p = power(b, q)
        if p.kind == "const":
            c *= p.payload
        elif p.kind == "mul":
            for g in p.args:
                if g.kind == "const":
                    c *= g.payload
                else:
                    out.append(g)
        else:
            out.append(p)
    out.extend(loose)
    out.sort(key=ScalarField.sortkey)
    if not out:
        return const(c)
    if c != 1.0:
        out.insert(0, const(c))
    if len(out) == 1:
        return out[0]
    return ScalarField._make("mul", None, tuple(out))


def _as_fraction(q) -> Fraction:
    if isinstance(q, Fraction):
        return q
    if isinstance(q, (int, np.integer)):
        return Fraction(int(q))
    fq = Fraction(float(q)).limit_denominator(10 ** 6)
    if abs(float(fq) - float(q)) > 1e-15 * max(1.0, abs(float(q))):
        raise ValueError(f"exponent {q} is not a simple rational")
    return fq


def power(base, q) -> ScalarField:
    base = as_field(base)
    q = _as_fraction(q)
    if q == 0:
        return const(1.0)
    if q == 1:
        return base
    if base.kind == "const":
        b = base.payload
        if b == 0.0 and q < 0:
            return ScalarField._make("pow", q, (base,))  # evaluation raises
        if b >= 0 or q.denominator == 1:
            v = b ** float(q) if q.denominator != 1 else b ** int(q)
            if isinstance(v, float) and math.isfinite(v):
                return const(v)
        return ScalarField._make("pow", q, (base,))
    if base.kind == "pow" and q.denominator == 1:
        return power(base.args[0], base.payload * q)
    if base.kind == "mul" and q.denominator == 1:
        return mul(*[power(f, q) for f in base.args])
    return ScalarField._make("pow", q, (base,))


_FOLD = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "abs": abs}


def fn(name: str, arg) -> ScalarField:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    arg = as_field(arg)
    if arg.kind == "const":
        v = arg.payload
        if name in _FOLD:
            r = _FOLD[name](v)
            if math.isfinite(r):
                return const(r)
        elif name == "log" and v > 0:
            return const(math.log(v))
        elif name == "sqrt" and v >= 0:
            return const(math.sqrt(v))
    if name == "abs" and arg.kind == "fn" and arg.payload in ("abs", "exp", "sqrt"):
        return arg
    return ScalarField._make("fn", name, (arg,))


def sin(a):
    return fn("sin", a)


def cos(a):
    return fn("cos", a)


def exp(a):
    return fn("exp", a)


def log(a):
    return fn("log", a)


def sqrt(a):
    return fn("sqrt", a)


def absf(a):
    return fn("abs", a)


ZERO = const(0.0)
ONE = const(1.0)


def size(f: ScalarField | Iterable[ScalarField]) -> int:
    """Number of distinct nodes (shared subtrees counted once)."""
    seen = set()
    stack = [f] if isinstance(f, ScalarField) else list(f)
    while stack:
        g = stack.pop()
        if id(g) in seen:
            continue
        seen.add(id(g))
        stack.extend(g.args)
    return len(seen)


# ---------------------------------------------------------------------------
# differentiation

def differentiate(f: ScalarField, k: int) -> ScalarField:
    """Exact partial derivative with respect to variable index ``k``."""
    if k < 0:
        raise IndexError("coordinate index out of range")
    if k not in f.vars:
        return ZERO
    d = f._dcache.get(k)
    if d is None:
        d = _diff(f, k)
        f._dcache[k] = d
    return d


def _diff(f: ScalarField, k: int) -> ScalarField:
    kind = f.kind
    if kind == "var":
        return ONE
    if kind == "add":
        return add(*[differentiate(t, k) for t in f.args])
    if kind == "mul":
        terms = []
        for i, fi in enumerate(f.args):
            di = differentiate(fi, k)
            if di is ZERO:
                continue
            terms.append(mul(di, *(f.args[:i] + f.args[i + 1:])))
        return add(*terms)
    if kind == "pow":
        b = f.args[0]
        q = f.payload
        return mul(const(float(q)), power(b, q - 1), differentiate(b, k))
    if kind == "fn":
        a = f.args[0]
        da = differentiate(a, k)
        name = f.payload
        if name == "sin":
            outer = fn("cos", a)
        elif name == "cos":
            outer = mul(const(-1.0), fn("sin", a))
        elif name == "exp":
            outer = f
        elif name == "log":
            outer = power(a, -1)
        elif name == "sqrt":
            outer = mul(const(0.5), power(f, -1))
        else:  # abs
            outer = mul(a, power(f, -1))
        return mul(outer, da)
    raise AssertionError(kind)


# ---------------------------------------------------------------------------
# evaluation

def _postorder(roots: Sequence[ScalarField], memo: dict) -> list[ScalarField]:
    order = []
    seen = set(memo)
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded or not node.args:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for a in node.args:
            if id(a) not in seen:
                stack.append((a, False))
    return order


def _bad(mask: np.ndarray, X: np.ndarray, node: ScalarField, msg: str):
    idx = int(np.flatnonzero(mask)[0])
    raise DomainError(msg, node, X[idx])


def evaluate_many(fields, X, memo: dict | None = None) -> list[np.ndarray]:
    """Evaluate several fields at the rows of ``X`` (shape (P, nvars)).

    Shared subexpressions are evaluated once.  ``memo`` may be passed to
    reuse values across calls at the same points.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P = X.shape[0]
    if memo is None:
        memo = {}
    fields = [as_field(f) for f in fields]
    for node in _postorder(fields, memo):
        kind = node.kind
        if kind == "const":
            v = np.full(P, node.payload)
        elif kind == "var":
            if node.payload >= X.shape[1]:
                raise IndexError(f"variable index {node.payload} outside point of length {X.shape[1]}")
            v = X[:, node.payload]
        elif kind == "add":
            v = memo[id(node.args[0])].copy()
            for a in node.args[1:]:
                v += memo[id(a)]
        elif kind == "mul":
            v = memo[id(node.args[0])].copy()
            for a in node.args[1:]:
                v *= memo[id(a)]
        elif kind == "pow":
            b = memo[id(node.args[0])]
            q = node.payload
            if q < 0:
                zero = b == 0.0
                if zero.any():
                    _bad(zero, X, node, "division by zero")
            if q.denominator == 1:
                v = b ** int(q) if q > 0 else 1.0 / b ** int(-q)
            else:
                neg = b < 0.0
                if neg.any():
                    _bad(neg, X, node, "non-integer power of a negative number")
                v = np.power(b, float(q))
        else:
            a = memo[id(node.args[0])]
            name = node.payload
            if name == "log":
                badm = a <= 0.0
                if badm.any():
                    _bad(badm, X, node, "log of a non-positive number")
                v = np.log(a)
            elif name == "sqrt":
                badm = a < 0.0
                if badm.any():
                    _bad(badm, X, node, "sqrt of a negative number")
                v = np.sqrt(a)
            elif name == "sin":
                v = np.sin(a)
            elif name == "cos":
                v = np.cos(a)
            elif name == "exp":
                v = np.exp(a)
            else:
                v = np.abs(a)
        memo[id(node)] = v
    # keep memo entries alive only while nodes live: callers hold the fields
    return [memo[id(f)] for f in fields]


def evaluate(f: ScalarField, p: Point | Sequence[float]) -> float:
    vals = p.values if isinstance(p, Point) else np.asarray(p, dtype=float)
    return float(evaluate_many([f], vals[None, :])[0][0])


# ---------------------------------------------------------------------------
# printing

def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_text(f: ScalarField, chart: Chart | None = None) -> str:
    names = chart.names if chart is not None else None
    return _fmt(f, names, 0)


# precedence: 1 sum, 2 product, 3 unary minus, 4 power, 5 atom
def _fmt(f: ScalarField, names, ctx: int) -> str:
    kind = f.kind
    if kind == "const":
        s = _num(f.payload)
        return f"({s})" if f.payload < 0 and ctx > 1 else s
    if kind == "var":
        return names[f.payload] if names is not None else f"u{f.payload}"
    if kind == "fn":
        return f"{f.payload}({_fmt(f.args[0], names, 0)})"
    if kind == "pow":
        q = f.payload
        b = _fmt(f.args[0], names, 5)
        if f.args[0].kind == "pow":
            b = f"({b})"
        if q.denominator != 1:
            e = f"({q.numerator}/{q.denominator})"
        elif q < 0:
            e = f"({q.numerator})"
        else:
            e = str(q.numerator)
        return f"{b}^{e}"
    if kind == "mul":
        args = list(f.args)
        sign = ""
        if args[0].kind == "const" and args[0].payload == -1.0:
            sign = "-"
            args = args[1:]
        body = "*".join(_fmt(a, names, 3) for a in args)
        s = sign + body
        return f"({s})" if (ctx > 2 or (sign and ctx > 1)) else s
    if kind == "add":
        parts = []
        for i, t in enumerate(f.args):
            k, rest = _split_coeff(t)
            if i > 0 and k < 0:
                parts.append(" - " + _fmt(_neg_term(t), names, 2))
            elif i > 0:
                parts.append(" + " + _fmt(t, names, 2))
            else:
                parts.append(_fmt(t, names, 1))
        s = "".join(parts)
        return f"({s})" if ctx > 1 else s
    raise AssertionError(kind)


def _neg_term(t: ScalarField) -> ScalarField:
    return mul(const(-1.0), t)


# ---------------------------------------------------------------------------
# parsing

class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind, self.text, self.line, self.col = kind, text, line, col


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    i, line, col = 0, 1, 1
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        start_col = col
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            if text.count(".") > 1:
                raise ParseError(f"malformed number {text!r}", line, start_col)
            toks.append(_Tok("num", text, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(_Tok("id", src[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if src.startswith("**", i):
            toks.append(_Tok("op", "^", line, start_col))
            i += 2
            col += 2
            continue
        if ch in "+-*/^(),":
            toks.append(_Tok("op", ch, line, start_col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", line, start_col)
    toks.append(_Tok("end", "", line, col))
    return toks


class _Parser:
    def __init__(self, src: str, chart: Chart):
        self.toks = _tokenize(src)
        self.pos = 0
        self.chart = chart

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def take(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.take()
        if t.text != text or t.kind not in ("op",):
            shown = t.text or "end of input"
            raise ParseError(f"expected {text!r} but found {shown!r}", t.line, t.col)
        return t

    def parse(self) -> ScalarField:
        if self.peek().kind == "end":
            t = self.peek()
            raise ParseError("empty expression", t.line, t.col)
        e = self.expr()
        t = self.peek()
        if t.kind != "end":
            raise ParseError(f"unexpected token {t.text!r}", t.line, t.col)
        return e

    def expr(self) -> ScalarField:
        e = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.take().text
            r = self.term()
            e = add(e, r) if op == "+" else add(e, mul(const(-1.0), r))
        return e

    def term(self) -> ScalarField:
        e = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.take().text
            r = self.unary()
            e = mul(e, r) if op == "*" else mul(e, power(r, -1))
        return e

    def unary(self) -> ScalarField:
        t = self.peek()
        if t.kind == "op" and t.text in "+-":
            self.take()
            u = self.unary()
            return u if t.text == "+" else mul(const(-1.0), u)
        return self.pow_()

    def pow_(self) -> ScalarField:
        base = self.primary()
        t = self.peek()
        if t.kind == "op" and t.text == "^":
            self.take()
            ex = self.unary()
            if ex.kind == "const":
                try:
                    return power(base, ex.payload)
                except ValueError:
                    pass
            return fn("exp", mul(ex, fn("log", base)))
        return base

    def primary(self) -> ScalarField:
        t = self.take()
        if t.kind == "num":
            return const(float(t.text))
        if t.kind == "id":
            if t.text in FUNCTIONS:
                nxt = self.peek()
                if not (nxt.kind == "op" and nxt.text == "("):
                    raise ArityError(f"function {t.text!r} must be called with arguments", t.line, t.col)
                self.take()
                args = []
                if not (self.peek().kind == "op" and self.peek().text == ")"):
                    args.append(self.expr())
                    while self.peek().kind == "op" and self.peek().text == ",":
                        self.take()
                        args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[t.text]:
                    raise ArityError(
                        f"function {t.text!r} takes {FUNCTIONS[t.text]} argument(s), got {len(args)}",
                        t.line, t.col)
                return fn(t.text, args[0])
            if t.text == "pi":
                return const(math.pi)
            try:
                return var(self.chart.index(t.text))
            except KeyError:
                raise UnknownIdentifierError(t.text, t.line, t.col) from None
        if t.kind == "op" and t.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        shown = t.text or "end of input"
        raise ParseError(f"unexpected {shown!r}", t.line, t.col)


def parse_scalar_field(src: str | float | int, chart: Chart) -> ScalarField:
    """Parse expression text into a field on ``chart``.

    Grammar (EBNF)::

        expr    = term , { ("+" | "-") , term } ;
        term    = unary , { ("*" | "/") , unary } ;
        unary   = [ "+" | "-" ] , unary | power ;
        power   = primary , [ ("^" | "**") , unary ] ;
        primary = number | "pi" | name | func , "(" , expr , ")" | "(" , expr , ")" ;
        func    = "sin" | "cos" | "exp" | "log" | "sqrt" | "abs" ;

    ``name`` must be a chart coordinate or parameter.  Powers are right
    associative and bind tighter than unary minus, so ``-x^2`` is ``-(x^2)``.
    """
    if isinstance(src, (int, float)):
        return const(float(src))
    return _Parser(str(src), chart).parse()


# ---------------------------------------------------------------------------
# small symbolic linear algebra

def field_matrix(rows, chart: Chart) -> np.ndarray:
    """Object array of fields from nested lists of text or numbers."""
    arr = np.asarray(rows, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    for idx, v in np.ndenumerate(arr):
        out[idx] = v if isinstance(v, ScalarField) else parse_scalar_field(v, chart)
    return out


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n, k = A.shape
    k2, m = B.shape
    assert k == k2
    out = np.empty((n, m), dtype=object)
    for i in range(n):
        for j in range(m):
            out[i, j] = add(*[mul(A[i, r], B[r, j]) for r in range(k)])
    return out


def sym_det(M: np.ndarray) -> ScalarField:
    k = M.shape[0]
    if k == 1:
        return M[0, 0]
    if k == 2:
        return add(mul(M[0, 0], M[1, 1]), mul(const(-1.0), M[0, 1], M[1, 0]))
    terms = []
    for j in range(k):
        minor = np.delete(np.delete(M, 0, axis=0), j, axis=1)
        s = 1.0 if j % 2 == 0 else -1.0
        terms.append(mul(const(s), M[0, j], sym_det(minor)))
    return add(*terms)


def sym_inverse(M: np.ndarray) -> np.ndarray:
    """Adjugate over determinant, entrywise symbolic."""
    k = M.shape[0]
    det = sym_det(M)
    inv_det = power(det, -1)
    out = np.empty((k, k), dtype=object)
    if k == 1:
        out[0, 0] = inv_det
        return out
    for i in range(k):
        for j in range(k):
            minor = np.delete(np.delete(M, j, axis=0), i, axis=1)
            s = 1.0 if (i + j) % 2 == 0 else -1.0
            out[i, j] = mul(const(s), sym_det(minor), inv_det)
    return out


def evaluate_array(arr, X, memo: dict | None = None) -> np.ndarray:
    """Evaluate an object array of fields; result has shape (P,) + arr.shape."""
    arr = np.asarray(arr, dtype=object)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    flat = [as_field(f) for f in arr.reshape(-1)]
    if not flat:
        return np.zeros((X.shape[0],) + arr.shape)
    vals = evaluate_many(flat, X, memo)
    out = np.stack(vals, axis=-1)
    return out.reshape((X.shape[0],) + arr.shape)


def map_fields(func, arr) -> np.ndarray:
    """Apply ``func`` to each entry of an object array."""
    arr = np.asarray(arr, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    for idx, v in np.ndenumerate(arr):
        out[idx] = func(v)
    return out


def zeros(shape) -> np.ndarray:
    out = np.empty(shape, dtype=object)
    out.fill(ZERO)
    return out


def as_batch(p, chart: Chart) -> tuple[np.ndarray, bool]:
    """Normalize a Point, a coordinate vector or a (P, k) array to rows.

    Rows may omit trailing parameters, which are then zero.  Returns the
    batch and whether the caller passed a single point.
    """
    if isinstance(p, Point):
        if p.chart.dim != chart.dim:
            raise ValueError("point belongs to a chart of different dimension")
        return p.values[None, :], True
    X = np.asarray(p, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] == chart.dim and chart.params:
        X = np.hstack([X, np.zeros((X.shape[0], len(chart.params)))])
    if X.shape[1] != chart.nvars:
        raise ValueError(f"expected {chart.dim} coordinates per point, got {X.shape[1]}")
    return X, single
