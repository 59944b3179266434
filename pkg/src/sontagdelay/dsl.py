"""A small language for control-affine retarded systems.

A model file looks like::

    system {
        n = 1  m = 1  delta = 1.0
        f = -x[0](0) + 0.5*x[0](-1.0)
        g = 1.0
    }

``x[i](-tau)`` reads component ``i`` of the state ``tau`` time units ago and
``integral(w(s)*x[i](s), s, lo, hi)`` is a distributed-delay term with a
polynomial weight. Other blocks (``clkf``, ``experiment``) may share the file;
``parse_model`` skips them.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .state import grid_count

DIVISION_EPS = 1e-12
MAX_WEIGHT_DEGREE = 4
FUNCTIONS = ("sin", "cos", "tanh", "exp", "abs", "sat")


# -- diagnostics ---------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str

    def __str__(self):
        return f"{self.line}:{self.col}: {self.message}"


class DslError(ValueError):
    """Syntax or validation failure; carries one or more diagnostics."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, Diagnostic):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


class EvalError(ArithmeticError):
    """Raised when a model expression cannot be evaluated to a finite value."""


# -- tokens --------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[^"\n]*")
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<punct>[{}\[\](),=+\-*/^])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # number | string | ident | punct | eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslError(Diagnostic(line, pos - line_start + 1, f"unexpected character {text[pos]!r}"))
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            tokens.append(Token(kind, chunk, line, pos - line_start + 1))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# -- expression tree -----------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class SVar:
    """The integration variable ``s`` of an enclosing integral."""


@dataclass(frozen=True)
class StateRef:
    """x[index](arg); ``arg`` is a time offset in [-delta, 0] or None for ``s``."""

    index: int
    arg: float | None


@dataclass(frozen=True)
class Unary:
    op: str  # neg or a name from FUNCTIONS
    operand: Expr


@dataclass(frozen=True)
class Binary:
    op: str  # + - * /
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Power:
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Integral:
    body: Expr
    lo: float
    hi: float


Expr = Union[Const, SVar, StateRef, Unary, Binary, Power, Integral]


def walk(node: Expr):
    yield node
    if isinstance(node, Unary):
        yield from walk(node.operand)
    elif isinstance(node, Binary):
        yield from walk(node.left)
        yield from walk(node.right)
    elif isinstance(node, Power):
        yield from walk(node.base)
    elif isinstance(node, Integral):
        yield from walk(node.body)


# -- printing ------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}
_ATOM = 5


def format_number(x: float) -> str:
    return repr(float(x))


def to_text(node: Expr) -> str:
    return _fmt(node)[0]


def _wrap(node: Expr, required: int) -> str:
    text, prec = _fmt(node)
    return f"({text})" if prec < required else text


def _fmt(node: Expr) -> tuple[str, int]:
    """Text and binding strength; parser is left-associative, so right operands need one more."""
    if isinstance(node, Const):
        text = format_number(node.value)
        return text, 3 if text.startswith("-") else _ATOM
    if isinstance(node, SVar):
        return "s", _ATOM
    if isinstance(node, StateRef):
        arg = "s" if node.arg is None else format_number(node.arg)
        return f"x[{node.index}]({arg})", _ATOM
    if isinstance(node, Integral):
        lo, hi = format_number(node.lo), format_number(node.hi)
        return f"integral({to_text(node.body)}, s, {lo}, {hi})", _ATOM
    if isinstance(node, Power):
        return f"{_wrap(node.base, _ATOM)}^{node.exponent}", 4
    if isinstance(node, Unary):
        if node.op != "neg":
            return f"{node.op}({to_text(node.operand)})", _ATOM
        operand = node.operand
        if isinstance(operand, Const) and not format_number(operand.value).startswith("-"):
            # "-1.0" would reparse as a negative literal
            return f"-({format_number(operand.value)})", 3
        return "-" + _wrap(operand, 3), 3
    if isinstance(node, Binary):
        prec = _PREC[node.op]
        return f"{_wrap(node.left, prec)} {node.op} {_wrap(node.right, prec + 1)}", prec
    raise TypeError(f"not an expression node: {node!r}")


# -- evaluation ----------------------------------------------------------------


def _sat(v):
    return np.clip(v, -1.0, 1.0)


_UNARY = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "abs": np.abs,
    "sat": _sat,
}


def quadrature_nodes(lo: float, hi: float, step: float) -> np.ndarray:
    k = grid_count(hi - lo, step)
    if k is None:
        raise EvalError(f"integral bounds [{lo}, {hi}] are not aligned with grid step {step}")
    return np.linspace(lo, hi, k + 1)


class _Evaluator:
    """Walks an expression with state lookups served by a history view.

    The view must provide ``eval(tau)`` (vectorized) and ``step``.
    """

    def __init__(self, view):
        self.view = view
        self.cache: dict[float, np.ndarray] = {}

    def lookup(self, tau: float) -> np.ndarray:
        v = self.cache.get(tau)
        if v is None:
            v = self.cache[tau] = self.view.eval(tau)
        return v

    def run(self, node, s=None, xs=None):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, StateRef):
            if node.arg is None:
                return xs[:, node.index]
            return self.lookup(node.arg)[node.index]
        if isinstance(node, Binary):
            left = self.run(node.left, s, xs)
            right = self.run(node.right, s, xs)
            op = node.op
            if op == "+":
                return left + right
            if op == "-":
                return left - right
            if op == "*":
                return left * right
            if np.any(np.abs(right) < DIVISION_EPS):
                raise EvalError(f"division by near-zero value in {to_text(node)}")
            return left / right
        if isinstance(node, Unary):
            return _UNARY[node.op](self.run(node.operand, s, xs))
        if isinstance(node, Power):
            return self.run(node.base, s, xs) ** node.exponent
        if isinstance(node, SVar):
            return s
        if isinstance(node, Integral):
            taus = quadrature_nodes(node.lo, node.hi, self.view.step)
            values = self.view.eval(taus)
            integrand = self.run(node.body, taus, values)
            integrand = np.broadcast_to(integrand, taus.shape)
            return float(np.trapezoid(integrand, dx=self.view.step))
        raise TypeError(f"not an expression node: {node!r}")

    def first_nonfinite(self, node, s=None, xs=None):
        """Deepest node whose value is not finite, for error messages."""
        children = []
        if isinstance(node, Unary):
            children = [node.operand]
        elif isinstance(node, Binary):
            children = [node.left, node.right]
        elif isinstance(node, Power):
            children = [node.base]
        for child in children:
            bad = self.first_nonfinite(child, s, xs)
            if bad is not None:
                return bad
        if isinstance(node, Integral):
            taus = quadrature_nodes(node.lo, node.hi, self.view.step)
            bad = self.first_nonfinite(node.body, taus, self.view.eval(taus))
            if bad is not None:
                return bad
        with np.errstate(all="ignore"):
            value = self.run(node, s, xs)
        return None if np.all(np.isfinite(value)) else node


def evaluate(nodes, view) -> np.ndarray:
    """Evaluate a sequence of expressions against a history view."""
    ev = _Evaluator(view)
    with np.errstate(all="ignore"):
        out = np.array([ev.run(node) for node in nodes], dtype=float)
    if not np.isfinite(out).all():
        for node in nodes:
            bad = ev.first_nonfinite(node)
            if bad is not None:
                raise EvalError(f"non-finite value at {to_text(bad)}")
        raise EvalError("non-finite value")
    return out


# -- integral weight analysis --------------------------------------------------


def _padd(p, q):
    out = np.zeros(max(len(p), len(q)))
    out[: len(p)] += p
    out[: len(q)] += q
    return out


def linear_form(body: Expr) -> dict:
    """Decompose an integrand as sum_i w_i(s) x[i](s) + w(s).

    Returns ``{key: ascending polynomial coefficients}`` with ``None`` for the
    state-free part. Raises ValueError if the integrand is not of that shape.
    """
    if isinstance(body, Const):
        return {None: np.array([body.value])}
    if isinstance(body, SVar):
        return {None: np.array([0.0, 1.0])}
    if isinstance(body, StateRef):
        if body.arg is not None:
            raise ValueError("state references inside an integral must use s")
        return {body.index: np.array([1.0])}
    if isinstance(body, Unary):
        if body.op != "neg":
            raise ValueError(f"{body.op}() is not allowed in an integral weight; weights are polynomials in s")
        return {k: -v for k, v in linear_form(body.operand).items()}
    if isinstance(body, Binary):
        lf, rf = linear_form(body.left), linear_form(body.right)
        if body.op in "+-":
            sign = 1.0 if body.op == "+" else -1.0
            out = dict(lf)
            for k, v in rf.items():
                out[k] = _padd(out.get(k, np.zeros(1)), sign * v)
            return out
        if body.op == "*":
            if set(lf) - {None} and set(rf) - {None}:
                raise ValueError("integrand must be linear in the state")
            if set(lf) - {None}:
                lf, rf = rf, lf
            w = lf[None]
            return {k: np.polymul(v[::-1], w[::-1])[::-1] for k, v in rf.items()}
        # division: denominator must be a nonzero constant
        if set(rf) - {None} or len(np.trim_zeros(rf[None], "b")) > 1:
            raise ValueError("integrand may only be divided by a constant")
        den = rf[None][0]
        if abs(den) < DIVISION_EPS:
            raise ValueError("division by zero in integrand")
        return {k: v / den for k, v in lf.items()}
    if isinstance(body, Power):
        base = linear_form(body.base)
        if set(base) - {None}:
            if body.exponent == 1:
                return base
            raise ValueError("integrand must be linear in the state")
        w = np.array([1.0])
        for _ in range(body.exponent):
            w = np.polymul(w[::-1], base[None][::-1])[::-1]
        return {None: w}
    if isinstance(body, Integral):
        raise ValueError("nested integrals are not supported")
    raise TypeError(f"not an expression node: {body!r}")


def weight_degree(body: Expr) -> int:
    form = linear_form(body)
    degs = [len(np.trim_zeros(np.asarray(v, dtype=float), "b")) - 1 for v in form.values()]
    return max([d for d in degs] + [0])


# -- model ---------------------------------------------------------------------


@dataclass(frozen=True)
class SystemModel:
    """Control-affine retarded system x' = f(x_t) + g(x_t) u."""

    n: int
    m: int
    delta: float
    f: tuple
    g: tuple  # row-major n*m entries

    @property
    def discrete_delays(self) -> tuple[float, ...]:
        delays = {0.0}
        for node in self.f + self.g:
            for sub in walk(node):
                if isinstance(sub, StateRef) and sub.arg is not None:
                    delays.add(abs(sub.arg))
        return tuple(sorted(delays))

    @property
    def integrals(self) -> tuple[Integral, ...]:
        return tuple(s for node in self.f + self.g for s in walk(node) if isinstance(s, Integral))

    @property
    def division_nodes(self) -> tuple[str, ...]:
        """Division subexpressions; the only places evaluation may fail."""
        return tuple(
            to_text(s)
            for node in self.f + self.g
            for s in walk(node)
            if isinstance(s, Binary) and s.op == "/"
        )

    def eval_f(self, seg) -> np.ndarray:
        self._check_segment(seg)
        return evaluate(self.f, seg)

    def eval_g(self, seg) -> np.ndarray:
        self._check_segment(seg)
        return evaluate(self.g, seg).reshape(self.n, self.m)

    def _check_segment(self, seg):
        if seg.samples.shape[1] != self.n:
            raise ValueError(f"segment has dimension {seg.samples.shape[1]}, model needs n={self.n}")
        if abs(seg.delta - self.delta) > 1e-12 * max(1.0, self.delta):
            raise ValueError(f"segment delta {seg.delta} differs from model delta {self.delta}")
        if self.validate(seg.step):
            raise ValueError(f"segment grid step {seg.step} is not aligned with the model delays")

    def validate(self, grid_step: float) -> list[str]:
        """Grid-alignment violations for ``grid_step``; empty when usable."""
        problems = []
        if grid_count(self.delta, grid_step) is None:
            problems.append(f"step {grid_step} does not divide delta {self.delta}")
        for d in self.discrete_delays:
            if d > 0 and grid_count(d, grid_step) is None:
                problems.append(f"step {grid_step} does not divide delay {d}")
        for node in self.integrals:
            for bound in (node.lo, node.hi):
                if bound != 0 and grid_count(abs(bound), grid_step) is None:
                    problems.append(f"step {grid_step} does not divide integral bound {bound}")
        return problems

    def to_text(self) -> str:
        def vec(nodes):
            if len(nodes) == 1:
                return to_text(nodes[0])
            return "[" + ", ".join(to_text(e) for e in nodes) + "]"

        return (
            "system {\n"
            f"    n = {self.n}\n"
            f"    m = {self.m}\n"
            f"    delta = {format_number(self.delta)}\n"
            f"    f = {vec(self.f)}\n"
            f"    g = {vec(self.g)}\n"
            "}\n"
        )


# -- parser --------------------------------------------------------------------


class Parser:
    """Recursive-descent parser over a token list; shared by all block kinds."""

    def __init__(self, text_or_tokens):
        self.tokens = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        self.pos = 0
        # deferred checks that need delta/n: (token, kind, a, b)
        self.pending: list = []
        # set while parsing an initial history: expressions in s only
        self.state_free = False

    # token helpers

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset=1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tok
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, message, tok=None) -> DslError:
        tok = tok or self.tok
        return DslError(Diagnostic(tok.line, tok.col, message))

    def at(self, text) -> bool:
        return self.tok.kind in ("punct", "ident") and self.tok.text == text

    def expect(self, text) -> Token:
        if not self.at(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            raise self.error(f"expected a name, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def string(self) -> str:
        if self.tok.kind != "string":
            raise self.error(f"expected a quoted string, found {self.tok.text or 'end of input'!r}")
        return self.advance().text[1:-1]

    def number(self) -> float:
        sign = 1.0
        if self.at("-"):
            self.advance()
            sign = -1.0
        elif self.at("+"):
            self.advance()
        if self.tok.kind != "number":
            raise self.error(f"expected a number, found {self.tok.text or 'end of input'!r}")
        return sign * float(self.advance().text)

    def integer(self) -> int:
        tok = self.tok
        value = self.number()
        if value != int(value):
            raise self.error(f"expected an integer, found {tok.text!r}", tok)
        return int(value)

    def number_list(self) -> list[float]:
        """``[1, 2, 3]`` or nested rows ``[[1, 2], [3, 4]]`` flattened row-major."""
        self.expect("[")
        values = []
        while not self.at("]"):
            if self.at("["):
                values.extend(self.number_list())
            else:
                values.append(self.number())
            if not self.at("]"):
                self.expect(",")
        self.expect("]")
        return values

    def skip_block(self):
        self.expect("{")
        depth = 1
        while depth:
            tok = self.advance()
            if tok.kind == "eof":
                raise self.error("unterminated block")
            if tok.text == "{":
                depth += 1
            elif tok.text == "}":
                depth -= 1

    # expressions

    def expr(self, in_integral=False) -> Expr:
        node = self.term(in_integral)
        while self.at("+") or self.at("-"):
            op = self.advance().text
            node = Binary(op, node, self.term(in_integral))
        return node

    def term(self, in_integral) -> Expr:
        node = self.factor(in_integral)
        while self.at("*") or self.at("/"):
            op = self.advance().text
            node = Binary(op, node, self.factor(in_integral))
        return node

    def factor(self, in_integral) -> Expr:
        if self.at("-"):
            self.advance()
            if self.tok.kind == "number" and not (self.peek().text == "^"):
                return Const(-float(self.advance().text))
            return Unary("neg", self.factor(in_integral))
        base = self.atom(in_integral)
        if self.at("^"):
            self.advance()
            tok = self.tok
            if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text):
                raise self.error("exponent must be a non-negative integer literal")
            self.advance()
            return Power(base, int(tok.text))
        return base

    def atom(self, in_integral) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Const(float(tok.text))
        if self.at("("):
            self.advance()
            node = self.expr(in_integral)
            self.expect(")")
            return node
        if tok.kind != "ident":
            raise self.error(f"unexpected {tok.text or 'end of input'!r} in expression")
        name = tok.text
        if self.state_free and name in ("x", "integral"):
            raise self.error("initial history may only depend on s")
        if name == "x":
            return self.stateref(in_integral)
        if name == "s":
            if not in_integral:
                raise self.error("'s' is only defined inside integral(...)")
            self.advance()
            return SVar()
        if name == "integral":
            if in_integral:
                raise self.error("nested integrals are not supported")
            return self.integral()
        if name in FUNCTIONS:
            self.advance()
            self.expect("(")
            arg = self.expr(in_integral)
            self.expect(")")
            return Unary(name, arg)
        raise self.error(f"unknown identifier {name!r}")

    def stateref(self, in_integral) -> StateRef:
        start = self.advance()
        self.expect("[")
        idx_tok = self.tok
        index = self.integer()
        if index < 0:
            raise self.error("state index must be non-negative", idx_tok)
        self.expect("]")
        self.expect("(")
        if self.at("s"):
            if not in_integral:
                raise self.error("x[i](s) is only valid inside integral(...)")
            self.advance()
            arg = None
        else:
            if in_integral:
                raise self.error("state references inside an integral must use s")
            arg = self.number()
        self.expect(")")
        self.pending.append((start, "ref", index, arg))
        return StateRef(index, arg)

    def integral(self) -> Integral:
        start = self.advance()
        self.expect("(")
        body = self.expr(in_integral=True)
        self.expect(",")
        if not self.at("s"):
            raise self.error("integration variable must be s")
        self.advance()
        self.expect(",")
        lo = self.number()
        self.expect(",")
        hi = self.number()
        self.expect(")")
        try:
            degree = weight_degree(body)
        except ValueError as exc:
            raise self.error(str(exc), start) from None
        if degree > MAX_WEIGHT_DEGREE:
            raise self.error(f"integral weight has degree {degree}; at most {MAX_WEIGHT_DEGREE} supported", start)
        self.pending.append((start, "integral", lo, hi))
        return Integral(body, lo, hi)

    def vector(self, in_integral=False) -> list:
        """A single expression or ``[e1, e2, ...]``."""
        if self.at("["):
            self.advance()
            items = [self.expr(in_integral)]
            while self.at(","):
                self.advance()
                items.append(self.expr(in_integral))
            self.expect("]")
            return items
        return [self.expr(in_integral)]

    # system block

    def system_block(self) -> SystemModel:
        head = self.expect("system")
        self.expect("{")
        self.pending = []
        scalars: dict[str, tuple[Token, float]] = {}
        exprs: dict[str, tuple[Token, list]] = {}
        while not self.at("}"):
            key = self.ident()
            if key.text in scalars or key.text in exprs:
                raise self.error(f"{key.text} declared twice", key)
            self.expect("=")
            if key.text in ("n", "m"):
                scalars[key.text] = (key, self.integer())
            elif key.text == "delta":
                scalars[key.text] = (key, self.number())
            elif key.text in ("f", "g"):
                exprs[key.text] = (key, self.vector())
            else:
                raise self.error(f"unknown system field {key.text!r}", key)
        self.expect("}")
        diags = []
        for name in ("n", "m", "delta", "f", "g"):
            if name not in scalars and name not in exprs:
                diags.append(Diagnostic(head.line, head.col, f"system block is missing {name}"))
        if diags:
            raise DslError(diags)
        n, m, delta = scalars["n"][1], scalars["m"][1], scalars["delta"][1]
        for name in ("n", "m", "delta"):
            tok, value = scalars[name]
            if value <= 0:
                diags.append(Diagnostic(tok.line, tok.col, f"{name} must be positive"))
        ftok, f = exprs["f"]
        gtok, g = exprs["g"]
        if len(f) != n:
            diags.append(Diagnostic(ftok.line, ftok.col, f"f has {len(f)} entries, expected n={n}"))
        if len(g) != n * m:
            diags.append(Diagnostic(gtok.line, gtok.col, f"g has {len(g)} entries, expected n*m={n * m}"))
        for tok, kind, a, b in self.pending:
            if kind == "ref":
                if a >= n:
                    diags.append(Diagnostic(tok.line, tok.col, f"state index {a} out of range for n={n}"))
                if b is None:
                    continue
                if b > 0:
                    diags.append(Diagnostic(tok.line, tok.col, f"x[{a}]({format_number(b)}) refers to the future"))
                elif -b > delta * (1 + 1e-12):
                    diags.append(Diagnostic(tok.line, tok.col, f"delay {format_number(-b)} exceeds delta {format_number(delta)}"))
            else:
                if not (-delta * (1 + 1e-12) <= a < b <= 0):
                    diags.append(
                        Diagnostic(
                            tok.line,
                            tok.col,
                            f"integral bounds [{format_number(a)}, {format_number(b)}] must satisfy "
                            f"-delta <= lo < hi <= 0 with delta {format_number(delta)}",
                        )
                    )
        if diags:
            raise DslError(diags)
        return SystemModel(n, m, float(delta), tuple(f), tuple(g))


def parse_model(text: str) -> SystemModel:
    """Parse the ``system`` block of ``text``; other blocks are skipped."""
    p = Parser(text)
    model = None
    while p.tok.kind != "eof":
        if p.at("system"):
            if model is not None:
                raise p.error("more than one system block")
            model = p.system_block()
        else:
            p.ident()
            p.skip_block()
    if model is None:
        raise DslError(Diagnostic(1, 1, "no system block found"))
    return model


def parse_expr(text: str, in_integral: bool = False) -> Expr:
    """Parse a standalone expression (used for histories and tests)."""
    p = Parser(text)
    node = p.expr(in_integral)
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r} after expression")
    return node


def eval_scalar(node: Expr, s: float) -> float:
    """Evaluate a state-free expression in the variable ``s``."""
    if any(isinstance(sub, (StateRef, Integral)) for sub in walk(node)):
        raise EvalError(f"{to_text(node)} must not reference the state")
    value = _Evaluator(None).run(node, s=s)
    if not math.isfinite(value):
        raise EvalError(f"non-finite value of {to_text(node)} at s={s}")
    return float(value)
