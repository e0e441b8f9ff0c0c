"""Arithmetic expression parser and evaluator for coefficient/payoff formulas.

Expressions are written in the variables t, x1, x2, ... and support
+, -, *, /, ^ (right associative), unary minus and the functions
exp, log, sin, cos, sqrt, abs, min, max, tanh.  Evaluation is vectorized:
variables may be bound to floats or numpy arrays of a common shape.

Domain violations (division by zero, log of a non-positive argument,
sqrt of a negative argument) raise EvalError instead of producing NaN.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expression",
    "ParseError",
    "EvalError",
    "parse_expression",
    "eval_with_derivatives",
]

_FUNCTIONS = {
    "exp": (1, np.exp),
    "log": (1, None),  # domain checked
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "sqrt": (1, None),  # domain checked
    "abs": (1, np.abs),
    "tanh": (1, np.tanh),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_VAR_RE = re.compile(r"^(t|x[1-9][0-9]*)$")
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\^|\+|-|\*|/|\(|\)|,))"
)


class ParseError(ValueError):
    """Syntax/identifier/arity error; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalError(ArithmeticError):
    """Domain violation during evaluation (never a silent NaN)."""


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    offset: int


def _tokenize(src: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace before reporting
            stripped = src[pos:].lstrip()
            off = len(src) - len(stripped)
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", off)
        for kind in ("num", "ident", "op"):
            text = m.group(kind)
            if text is not None:
                toks.append(_Tok(kind, text, m.start(kind)))
                break
        pos = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


# AST nodes: ("num", v) | ("var", name) | ("neg", a) | ("bin", op, a, b)
#          | ("call", name, (args...))


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.next()
        if tok.kind != "op" or tok.text != op:
            raise ParseError(f"expected {op!r}, found {tok.text or 'end of input'!r}", tok.offset)

    # expr := term (('+'|'-') term)*
    def expr(self):
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.next().text
            node = ("bin", op, node, self.term())
        return node

    # term := unary (('*'|'/') unary)*
    def term(self):
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.next().text
            node = ("bin", op, node, self.unary())
        return node

    # unary := '-' unary | power
    def unary(self):
        if self.peek().kind == "op" and self.peek().text == "-":
            self.next()
            return ("neg", self.unary())
        return self.power()

    # power := atom ('^' unary)?   (right associative, binds above unary minus)
    def power(self):
        node = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.next()
            node = ("bin", "^", node, self.unary())
        return node

    def atom(self):
        tok = self.next()
        if tok.kind == "num":
            return ("num", float(tok.text))
        if tok.kind == "ident":
            if tok.text in _FUNCTIONS:
                arity = _FUNCTIONS[tok.text][0]
                self.expect_op("(")
                args = [self.expr()]
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.next()
                    args.append(self.expr())
                self.expect_op(")")
                if len(args) != arity:
                    raise ParseError(
                        f"{tok.text} expects {arity} argument(s), got {len(args)}", tok.offset
                    )
                return ("call", tok.text, tuple(args))
            if _VAR_RE.match(tok.text):
                return ("var", tok.text)
            raise ParseError(f"unknown identifier {tok.text!r}", tok.offset)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected {tok.text or 'end of input'!r}", tok.offset)

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"trailing input {tok.text!r}", tok.offset)
        return node


def _eval_node(node, env):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -_eval_node(node[1], env)
    if kind == "bin":
        _, op, a, b = node
        va, vb = _eval_node(a, env), _eval_node(b, env)
        if op == "+":
            return va + vb
        if op == "-":
            return va - vb
        if op == "*":
            return va * vb
        if op == "/":
            if np.any(vb == 0):
                raise EvalError("division by zero")
            return va / vb
        # op == "^": overflow saturates to inf (diverging states are the
        # caller's concern); NaN-producing powers are domain errors
        with np.errstate(invalid="raise", divide="ignore", over="ignore"):
            try:
                return np.power(va, vb, dtype=float)
            except FloatingPointError as exc:
                raise EvalError(f"invalid power: {exc}") from exc
    # call
    _, name, args = node
    vals = [_eval_node(a, env) for a in args]
    if name == "log":
        if np.any(np.asarray(vals[0]) <= 0):
            raise EvalError("log of non-positive argument")
        return np.log(vals[0])
    if name == "sqrt":
        if np.any(np.asarray(vals[0]) < 0):
            raise EvalError("sqrt of negative argument")
        return np.sqrt(vals[0])
    return _FUNCTIONS[name][1](*vals)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _to_str(node, parent_prec=0):
    kind = node[0]
    if kind == "num":
        return repr(node[1])
    if kind == "var":
        return node[1]
    if kind == "neg":
        inner = _to_str(node[1], _PREC["neg"])
        s = f"-{inner}"
        return f"({s})" if parent_prec > _PREC["neg"] else s
    if kind == "bin":
        _, op, a, b = node
        p = _PREC[op]
        # right-assoc ^, left-assoc others: force parens conservatively
        left = _to_str(a, p if op != "^" else p + 1)
        right = _to_str(b, p + 1 if op != "^" else p)
        s = f"{left} {op} {right}"
        return f"({s})" if parent_prec > p else s
    _, name, args = node
    return f"{name}({', '.join(_to_str(a) for a in args)})"


class Expression:
    """Immutable parsed formula over t, x1..xd.  Evaluation is deterministic."""

    __slots__ = ("_root", "_src", "_free")

    def __init__(self, root, src: str):
        object.__setattr__(self, "_root", root)
        object.__setattr__(self, "_src", src)
        object.__setattr__(self, "_free", frozenset(_collect_vars(root)))

    def __setattr__(self, *a):  # immutability guard
        raise AttributeError("Expression is immutable")

    @property
    def free_variables(self) -> frozenset[str]:
        return self._free

    @property
    def depends_on_t(self) -> bool:
        return "t" in self._free

    def max_space_index(self) -> int:
        idx = [int(v[1:]) for v in self._free if v != "t"]
        return max(idx) if idx else 0

    def __call__(self, t, x):
        """Evaluate at time t and spatial point(s) x.

        x is indexable by axis: x[i] is coordinate i+1 (scalar or ndarray).
        """
        env = {"t": t}
        for v in self._free:
            if v != "t":
                env[v] = x[int(v[1:]) - 1]
        return _eval_node(self._root, env)

    def __str__(self) -> str:
        return _to_str(self._root)

    def __repr__(self) -> str:
        return f"Expression({str(self)!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and self._root == other._root

    def __hash__(self):
        return hash(("Expression", self._src))


def _collect_vars(node, out=None):
    if out is None:
        out = set()
    kind = node[0]
    if kind == "var":
        out.add(node[1])
    elif kind == "neg":
        _collect_vars(node[1], out)
    elif kind == "bin":
        _collect_vars(node[2], out)
        _collect_vars(node[3], out)
    elif kind == "call":
        for a in node[2]:
            _collect_vars(a, out)
    return out


def parse_expression(src: str) -> Expression:
    """Parse a formula with standard precedence (^ > unary minus > */ > +-)."""
    return Expression(_Parser(src).parse(), src)


def eval_with_derivatives(e: Expression, point, order: int = 0, fd_step: float = 1e-5):
    """Value, spatial gradient and Hessian of e at point=(t, x) by central differences.

    The step for coordinate i is fd_step * max(1, |x_i|).  The Hessian is
    symmetrized by averaging.  Returns (value, grad, hess) with grad/hess
    None when not requested by order.
    """
    t, x = point
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    val = float(e(t, x))
    if order == 0:
        return val, None, None
    steps = fd_step * np.maximum(1.0, np.abs(x))
    grad = np.empty(d)
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        grad[i] = (float(e(t, xp)) - float(e(t, xm))) / (2 * steps[i])
    if order == 1:
        return val, grad, None
    hess = np.empty((d, d))
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        hess[i, i] = (float(e(t, xp)) - 2 * val + float(e(t, xm))) / steps[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [steps[i], steps[j]]
            xpm[i] += steps[i]
            xpm[j] -= steps[j]
            xmp[i] -= steps[i]
            xmp[j] += steps[j]
            xmm[[i, j]] -= [steps[i], steps[j]]
            hess[i, j] = hess[j, i] = (
                float(e(t, xpp)) - float(e(t, xpm)) - float(e(t, xmp)) + float(e(t, xmm))
            ) / (4 * steps[i] * steps[j])
    hess = 0.5 * (hess + hess.T)
    return val, grad, hess


def time_derivative(e: Expression, point, fd_step: float = 1e-5) -> float:
    """Central finite-difference time derivative of e at point=(t, x)."""
    t, x = point
    h = fd_step * max(1.0, abs(t))
    return (float(e(t + h, x)) - float(e(t - h, x))) / (2 * h)
