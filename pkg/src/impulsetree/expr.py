"""Arithmetic expression DSL for path-dependent model coefficients.

Volatility, drift, reward and controlled-drift functionals are written as
small arithmetic expressions over the path features cached at each tree
node.  Grammar:

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := number | ident | '-' factor | ident '(' args ')' | '(' expr ')'

Identifiers are restricted to the variables {t, x, xmax, xmin, xavg, u}
and the functions {min, max, abs, exp, clamp}.  Evaluation is strict:
division by zero, overflow and NaN raise instead of propagating, so a
coefficient either yields a finite number or the model build aborts.
"""

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = ("t", "x", "xmax", "xmin", "xavg", "u")
FUNCTIONS = {"min": 2, "max": 2, "abs": 1, "exp": 1, "clamp": 3}


class ExprError(ValueError):
    """Parse failure; ``offset`` is the byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EvalError(ValueError):
    """Evaluation failure: unbound variable or non-finite result."""


@dataclass(frozen=True)
class Lit:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: "tuple[Node, ...]"


Node = Union[Lit, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class CoefficientExpr:
    """A parsed coefficient expression; immutable, structurally comparable."""

    ast: Node

    def variables(self) -> frozenset:
        return frozenset(_collect_vars(self.ast))

    def __str__(self) -> str:
        return format_expr(self)


def _collect_vars(node):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _collect_vars(node.operand)
    elif isinstance(node, BinOp):
        yield from _collect_vars(node.left)
        yield from _collect_vars(node.right)
    elif isinstance(node, Call):
        for arg in node.args:
            yield from _collect_vars(arg)


_NUMBER_RE = re.compile(r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def _tokenize(source: str):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        ch = source[pos]
        if ch.isspace():
            pos += 1
            continue
        m = _NUMBER_RE.match(source, pos)
        if m:
            tokens.append(("num", m.group(), pos))
            pos = m.end()
            continue
        m = _IDENT_RE.match(source, pos)
        if m:
            tokens.append(("ident", m.group(), pos))
            pos = m.end()
            continue
        if ch in "+-*/(),":
            tokens.append(("op", ch, pos))
            pos += 1
            continue
        raise ExprError(f"unexpected character {ch!r}", pos)
    tokens.append(("eof", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, symbol):
        kind, text, offset = self.peek()
        if kind != "op" or text != symbol:
            raise ExprError(f"expected '{symbol}'", offset)
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, text, offset = self.peek()
        if kind != "eof":
            raise ExprError(f"unexpected trailing input {text!r}", offset)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                node = BinOp(text, node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                node = BinOp(text, node, self.factor())
            else:
                return node

    def factor(self):
        kind, text, offset = self.peek()
        if kind == "num":
            self.advance()
            return Lit(float(text))
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.factor())
        if kind == "op" and text == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            self.advance()
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                if text not in FUNCTIONS:
                    raise ExprError(f"unknown function '{text}'", offset)
                self.advance()
                args = [self.expr()]
                while True:
                    akind, atext, _ = self.peek()
                    if akind == "op" and atext == ",":
                        self.advance()
                        args.append(self.expr())
                    else:
                        break
                self.expect_op(")")
                arity = FUNCTIONS[text]
                if len(args) != arity:
                    raise ExprError(
                        f"function '{text}' expects {arity} argument(s), got {len(args)}",
                        offset,
                    )
                return Call(text, tuple(args))
            if text in FUNCTIONS:
                raise ExprError(f"function '{text}' must be called", offset)
            if text not in VARIABLES:
                raise ExprError(f"unknown identifier '{text}'", offset)
            return Var(text)
        raise ExprError("expected a number, identifier, '-' or '('", offset)


def parse_expr(source: str) -> CoefficientExpr:
    """Parse ``source`` into a coefficient expression.

    Raises ExprError (with byte offset) on malformed input, unknown
    identifiers and wrong function arity.
    """
    return CoefficientExpr(_Parser(_tokenize(source)).parse())


def _require_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise EvalError(f"non-finite result in {what}")
    return value


def _eval(node, env):
    if isinstance(node, Lit):
        return np.float64(node.value)
    if isinstance(node, Var):
        try:
            value = env[node.name]
        except KeyError:
            raise EvalError(f"unbound variable '{node.name}'") from None
        if isinstance(value, np.ndarray):
            return _require_finite(value, f"variable '{node.name}'")
        return _require_finite(np.float64(value), f"variable '{node.name}'")
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if node.op == "+":
                value = left + right
            elif node.op == "-":
                value = left - right
            elif node.op == "*":
                value = left * right
            else:
                value = left / right
        return _require_finite(value, f"operator '{node.op}'")
    if isinstance(node, Call):
        args = [_eval(arg, env) for arg in node.args]
        with np.errstate(over="ignore", invalid="ignore"):
            if node.func == "min":
                value = np.minimum(args[0], args[1])
            elif node.func == "max":
                value = np.maximum(args[0], args[1])
            elif node.func == "abs":
                value = np.abs(args[0])
            elif node.func == "exp":
                value = np.exp(args[0])
            else:  # clamp(v, lo, hi)
                value = np.minimum(np.maximum(args[0], args[1]), args[2])
        return _require_finite(value, f"function '{node.func}'")
    raise TypeError(f"not an expression node: {node!r}")


def eval_expr(expr: CoefficientExpr, env: Mapping):
    """Evaluate ``expr`` on ``env``, a mapping from variable names to floats
    or numpy arrays (arrays broadcast elementwise).

    Returns a float for scalar environments, an ndarray otherwise.  Fixed
    left-to-right evaluation order makes repeated evaluation bit-identical.
    """
    value = _eval(expr.ast, env)
    if isinstance(value, np.ndarray) and value.ndim:
        return value
    return float(value)


_PREC_ADD, _PREC_MUL, _PREC_UNARY = 1, 2, 3


def _fmt(node, context):
    if isinstance(node, Lit):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        text = "-" + _fmt(node.operand, _PREC_UNARY)
        return f"({text})" if context > _PREC_ADD else text
    if isinstance(node, BinOp):
        prec = _PREC_ADD if node.op in "+-" else _PREC_MUL
        sep = f" {node.op} " if node.op in "+-" else node.op
        text = _fmt(node.left, prec) + sep + _fmt(node.right, prec + 1)
        return f"({text})" if context > prec else text
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_fmt(arg, 0) for arg in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def format_expr(expr: CoefficientExpr) -> str:
    """Render an expression back to source; parse(format(parse(s))) is a
    fixed point for any parseable ``s``."""
    return _fmt(expr.ast, 0)
