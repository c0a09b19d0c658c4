"""Tiny arithmetic expression language for coefficient fields b, sigma, v.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Free variables are ``t`` and ``x``; constants ``pi`` and ``e``.
Evaluation is vectorized over numpy arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

VARIABLES = ("t", "x")
CONSTANTS = {"pi": np.pi, "e": np.e}
FUNCTIONS: dict[str, tuple[int, Callable[..., np.ndarray]]] = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


class ExprError(ValueError):
    """Parse failure with the byte offset and the set of tokens that would have been accepted."""

    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = expected
        detail = f"{message} at offset {offset}"
        if expected:
            detail += f" (expected one of: {', '.join(expected)})"
        super().__init__(detail)


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num" | "name" | "op" | "end"
    text: str
    pos: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            start = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprError(f"unexpected character {source[start]!r}", start,
                            ("number", "name", "(", "-"))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("end", "", len(source)))
    return toks


# Node types: ("num", value) | ("var", name) | ("const", name)
#             | ("neg", node) | ("bin", op, lhs, rhs) | ("call", name, args)
Node = tuple


class _Parser:
    def __init__(self, source: str):
        self.toks = _tokenize(source)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def _advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def _expect(self, text: str) -> None:
        if self.cur.text != text or self.cur.kind != "op":
            raise ExprError(f"unexpected {self._describe(self.cur)}", self.cur.pos, (text,))
        self._advance()

    @staticmethod
    def _describe(tok: _Tok) -> str:
        return "end of input" if tok.kind == "end" else f"token {tok.text!r}"

    def parse(self) -> Node:
        node = self.expr()
        if self.cur.kind != "end":
            raise ExprError(f"unexpected {self._describe(self.cur)}", self.cur.pos,
                            ("+", "-", "*", "/", "^", "end of input"))
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.cur.kind == "op" and self.cur.text in "+-":
            op = self._advance().text
            node = ("bin", op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.cur.kind == "op" and self.cur.text in "*/":
            op = self._advance().text
            node = ("bin", op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.cur.kind == "op" and self.cur.text == "-":
            self._advance()
            return ("neg", self.unary())
        if self.cur.kind == "op" and self.cur.text == "+":
            self._advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.cur.kind == "op" and self.cur.text == "^":
            self._advance()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self) -> Node:
        tok = self.cur
        if tok.kind == "num":
            self._advance()
            return ("num", float(tok.text))
        if tok.kind == "name":
            self._advance()
            if tok.text in FUNCTIONS:
                arity, _ = FUNCTIONS[tok.text]
                self._expect("(")
                args = [self.expr()]
                while self.cur.kind == "op" and self.cur.text == ",":
                    self._advance()
                    args.append(self.expr())
                if len(args) != arity:
                    raise ExprError(
                        f"function {tok.text!r} takes {arity} argument(s), got {len(args)}",
                        tok.pos)
                self._expect(")")
                return ("call", tok.text, tuple(args))
            if tok.text in VARIABLES:
                return ("var", tok.text)
            if tok.text in CONSTANTS:
                return ("const", tok.text)
            raise ExprError(f"unknown identifier {tok.text!r}", tok.pos,
                            VARIABLES + tuple(CONSTANTS) + tuple(FUNCTIONS))
        if tok.kind == "op" and tok.text == "(":
            self._advance()
            node = self.expr()
            self._expect(")")
            return node
        raise ExprError(f"unexpected {self._describe(tok)}", tok.pos,
                        ("number", "name", "(", "-"))


def _eval(node: Node, t, x):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return t if node[1] == "t" else x
    if kind == "const":
        return CONSTANTS[node[1]]
    if kind == "neg":
        return -_eval(node[1], t, x)
    if kind == "bin":
        a, b = _eval(node[2], t, x), _eval(node[3], t, x)
        op = node[1]
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return np.divide(a, b)
        return np.power(a, b)
    _, fn = FUNCTIONS[node[1]]
    return fn(*(_eval(arg, t, x) for arg in node[2]))


@dataclass(frozen=True)
class CoefficientExpr:
    """A parsed expression in ``t`` and ``x``."""

    source: str
    tree: Node = field(repr=False, compare=False)

    def __call__(self, t, x):
        with np.errstate(all="ignore"):
            t_arr = np.asarray(t, dtype=float)
            x_arr = np.asarray(x, dtype=float)
            out = _eval(self.tree, t_arr, x_arr)
            return np.broadcast_to(np.asarray(out, dtype=float),
                                   np.broadcast(t_arr, x_arr).shape).copy()


def parse_expr(source: str) -> CoefficientExpr:
    """Parse ``source``; raise :class:`ExprError` on syntax errors."""
    return CoefficientExpr(source, _Parser(source).parse())
