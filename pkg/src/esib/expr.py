"""Expression syntax trees: parsing, pre-order serialization, evaluation.

Trees are immutable.  Leaves are either constants or quantity slots
``N1 .. Nk`` that index into a :class:`QuantityMap` built from the problem
text; numeric values only re-enter at evaluation time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

OPERATORS: tuple[str, ...] = ("+", "−", "×", "÷", "^")
DEFAULT_CONSTANTS: tuple[float, ...] = (1.0, 3.14)
MAX_SLOTS = 10
ANSWER_RTOL = 1e-4

# ASCII spellings accepted on input; output always uses the glyphs above.
_OP_ALIASES = {
    "+": "+", "-": "−", "−": "−", "*": "×", "×": "×",
    "/": "÷", "÷": "÷", "^": "^", "**": "^",
}
_PRECEDENCE = {"+": 1, "−": 1, "×": 2, "÷": 2, "^": 3}
_SLOT_RE = re.compile(r"^N([1-9]\d*)$")


class ExprError(ValueError):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ArityError(ExprError):
    pass


class EvaluationError(ExprError):
    pass


class BindingError(ExprError):
    pass


class NumericOverflowError(EvaluationError):
    pass


class CapacityError(ExprError):
    pass


@dataclass(frozen=True)
class ExprToken:
    kind: str  # "operator" | "constant" | "slot"
    symbol: str | float | int

    def __post_init__(self):
        if self.kind == "operator":
            if self.symbol not in OPERATORS:
                raise ValueError(f"unknown operator {self.symbol!r}")
        elif self.kind == "slot":
            if not isinstance(self.symbol, int) or self.symbol < 1:
                raise ValueError(f"slot index must be an int >= 1, got {self.symbol!r}")
        elif self.kind == "constant":
            object.__setattr__(self, "symbol", float(self.symbol))
        else:
            raise ValueError(f"unknown token kind {self.kind!r}")

    @classmethod
    def op(cls, glyph: str) -> "ExprToken":
        return cls("operator", _OP_ALIASES.get(glyph, glyph))

    @classmethod
    def const(cls, value: float) -> "ExprToken":
        return cls("constant", float(value))

    @classmethod
    def slot(cls, index: int) -> "ExprToken":
        return cls("slot", int(index))

    @classmethod
    def parse(cls, text: str) -> "ExprToken":
        """Inverse of ``str(token)``."""
        if text in _OP_ALIASES:
            return cls.op(text)
        m = _SLOT_RE.match(text)
        if m:
            return cls.slot(int(m.group(1)))
        try:
            return cls.const(float(text))
        except ValueError:
            raise ExprError(f"unrecognised token {text!r}") from None

    @property
    def is_operator(self) -> bool:
        return self.kind == "operator"

    def __str__(self) -> str:
        if self.kind == "slot":
            return f"N{self.symbol}"
        if self.kind == "constant":
            return format_number(self.symbol)
        return str(self.symbol)


@dataclass(frozen=True)
class ExprTree:
    node: ExprToken
    left: "ExprTree | None" = None
    right: "ExprTree | None" = None

    def __post_init__(self):
        if self.node.is_operator:
            if self.left is None or self.right is None:
                raise ArityError(f"operator {self.node} needs two children")
        elif self.left is not None or self.right is not None:
            raise ArityError(f"leaf {self.node} cannot have children")

    @classmethod
    def leaf(cls, token: ExprToken) -> "ExprTree":
        return cls(token)

    @classmethod
    def binary(cls, op: str, left: "ExprTree", right: "ExprTree") -> "ExprTree":
        return cls(ExprToken.op(op), left, right)

    def __iter__(self) -> Iterator[ExprToken]:
        return iter(to_preorder(self))

    def __len__(self) -> int:
        return len(to_preorder(self))

    def depth(self) -> int:
        if self.left is None:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def slots(self) -> set[int]:
        return {t.symbol for t in to_preorder(self) if t.kind == "slot"}

    def __str__(self) -> str:
        return to_infix(self)


@dataclass(frozen=True)
class Quantity:
    surface: str
    value: float


class QuantityMap(tuple):
    """Ordered quantities of one problem; slot ``Ni`` is element ``i-1``."""

    def __new__(cls, items: Iterable[Quantity | float | tuple] = ()):
        out = []
        for item in items:
            if isinstance(item, Quantity):
                out.append(item)
            elif isinstance(item, tuple):
                out.append(Quantity(str(item[0]), float(item[1])))
            else:
                out.append(Quantity(format_number(item), float(item)))
        return super().__new__(cls, out)

    @property
    def values(self) -> list[float]:
        return [q.value for q in self]

    def value_of(self, slot: int) -> float:
        if not 1 <= slot <= len(self):
            raise BindingError(f"slot N{slot} not bound (problem has {len(self)} quantities)")
        return self[slot - 1].value


def format_number(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


# --------------------------------------------------------------------------
# pre-order serialization


def to_preorder(tree: ExprTree) -> list[ExprToken]:
    out: list[ExprToken] = []
    stack = [tree]
    while stack:
        node = stack.pop()
        out.append(node.node)
        if node.left is not None:
            stack.append(node.right)
            stack.append(node.left)
    return out


def from_preorder(tokens: Sequence[ExprToken | str]) -> ExprTree:
    """Rebuild a tree from its pre-order token sequence.

    Raises :class:`ArityError` when the sequence is truncated or has
    trailing tokens after a complete tree.
    """
    toks = [t if isinstance(t, ExprToken) else ExprToken.parse(t) for t in tokens]
    if not toks:
        raise ArityError("empty token sequence")
    # frames: [operator token, collected children]
    frames: list[list] = []
    for i, tok in enumerate(toks):
        if tok.is_operator:
            frames.append([tok, []])
            continue
        done = ExprTree(tok)
        while frames:
            frames[-1][1].append(done)
            if len(frames[-1][1]) < 2:
                break
            op, (left, right) = frames.pop()
            done = ExprTree(op, left, right)
        else:
            if i != len(toks) - 1:
                raise ArityError(f"{len(toks) - i - 1} trailing token(s) after complete tree")
            return done
    raise ArityError("truncated pre-order sequence")


def preorder_string(tree: ExprTree) -> str:
    return " ".join(str(t) for t in to_preorder(tree))


def parse_preorder(text: str) -> ExprTree:
    return from_preorder(text.split())


def is_valid_preorder(tokens: Sequence[ExprToken]) -> bool:
    """Cheap arity check: #leaves == #operators + 1 and no early completion."""
    need = 1
    for i, tok in enumerate(tokens):
        if need == 0:
            return False
        need += 1 if tok.is_operator else -1
    return need == 0 and len(tokens) > 0


def to_infix(tree: ExprTree, qmap: QuantityMap | None = None) -> str:
    """Parenthesized infix.  With ``qmap``, slots are replaced by surface numbers."""

    def leaf(tok: ExprToken) -> str:
        if tok.kind == "slot" and qmap is not None and tok.symbol <= len(qmap):
            return qmap[tok.symbol - 1].surface
        return str(tok)

    def walk(t: ExprTree, parent_prec: int, right_side: bool) -> str:
        if not t.node.is_operator:
            return leaf(t.node)
        op = t.node.symbol
        prec = _PRECEDENCE[op]
        # ^ is right-associative, the rest left-associative
        lhs = walk(t.left, prec, op == "^")
        rhs = walk(t.right, prec, op != "^")
        s = f"{lhs} {op} {rhs}" if op != "^" else f"{lhs}^{rhs}"
        if prec < parent_prec or (prec == parent_prec and right_side):
            s = f"({s})"
        return s

    return walk(tree, 0, False)


# --------------------------------------------------------------------------
# infix parsing

_LEX_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?%?|\.\d+%?)"
    r"|(?P<slot>N[1-9]\d*)|(?P<op>\*\*|[-+*/^×÷−])|(?P<paren>[()\[\]]))"
)


def _lex(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _LEX_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


def number_value(surface: str) -> float:
    """Numeric value of a surface number; ``"25%"`` -> 0.25."""
    s = surface.strip()
    if s.endswith("%"):
        return float(s[:-1]) / 100.0
    return float(s)


def _values_equal(a: float, b: float) -> bool:
    return a == b or abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


def parse_infix(
    text: str,
    qmap: QuantityMap = QuantityMap(),
    constants: Sequence[float] = DEFAULT_CONSTANTS,
) -> ExprTree:
    """Parse an infix expression, binding numbers found in ``qmap`` to slots.

    Numbers are matched against the quantity map by surface string first,
    then by value; among duplicates the first not-yet-used slot wins.
    Numbers absent from the map must be one of ``constants``.
    """
    tokens = _lex(text)
    used: set[int] = set()
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def bind(surface: str, at: int) -> ExprTree:
        if surface.startswith("N") and _SLOT_RE.match(surface):
            return ExprTree(ExprToken.slot(int(surface[1:])))
        value = number_value(surface)
        candidates = [i for i, q in enumerate(qmap, 1) if q.surface == surface]
        candidates += [
            i for i, q in enumerate(qmap, 1) if i not in candidates and _values_equal(q.value, value)
        ]
        if candidates:
            free = [i for i in candidates if i not in used]
            slot = free[0] if free else candidates[0]
            used.add(slot)
            return ExprTree(ExprToken.slot(slot))
        for c in constants:
            if _values_equal(c, value):
                return ExprTree(ExprToken.const(c))
        raise ParseError(f"number {surface!r} is neither a known quantity nor a constant", at)

    def primary() -> ExprTree:
        nonlocal pos
        tok = peek()
        if tok is None:
            raise ParseError("unexpected end of expression", len(text))
        kind, val, at = tok
        if kind in ("num", "slot"):
            pos += 1
            return bind(val, at)
        if kind == "paren" and val in "([":
            pos += 1
            inner = expression(0)
            close = peek()
            if close is None or close[0] != "paren" or close[1] not in ")]":
                raise ParseError("unbalanced parentheses", at)
            pos += 1
            return inner
        if kind == "op" and val in ("-", "−"):
            # unary minus as 0 - x is not representable without a 0 constant
            raise ParseError("unary minus is not supported", at)
        raise ParseError(f"unexpected token {val!r}", at)

    def expression(min_prec: int) -> ExprTree:
        nonlocal pos
        lhs = primary()
        while True:
            tok = peek()
            if tok is None or tok[0] != "op":
                break
            op = _OP_ALIASES[tok[1]]
            prec = _PRECEDENCE[op]
            if prec < min_prec:
                break
            pos += 1
            next_min = prec if op == "^" else prec + 1
            rhs = expression(next_min)
            lhs = ExprTree(ExprToken.op(op), lhs, rhs)
        return lhs

    if not tokens:
        raise ParseError("empty expression", 0)
    tree = expression(1)
    if pos != len(tokens):
        kind, val, at = tokens[pos]
        if kind == "paren":
            raise ParseError("unbalanced parentheses", at)
        raise ParseError(f"unexpected token {val!r}", at)
    return tree


# --------------------------------------------------------------------------
# evaluation


def apply_operator(op: str, a: float, b: float) -> float:
    if op == "+":
        r = a + b
    elif op == "−":
        r = a - b
    elif op == "×":
        r = a * b
    elif op == "÷":
        if b == 0:
            raise EvaluationError("division by zero")
        r = a / b
    elif op == "^":
        try:
            r = math.pow(a, b)
        except OverflowError:
            raise NumericOverflowError(f"{a}^{b} overflows") from None
        except (ValueError, ZeroDivisionError):
            raise EvaluationError(f"{a}^{b} is undefined over the reals") from None
    else:
        raise ExprError(f"unknown operator {op!r}")
    if not math.isfinite(r):
        raise NumericOverflowError(f"non-finite result for {a} {op} {b}")
    return r


def evaluate(tree: ExprTree, qmap: QuantityMap = QuantityMap()) -> float:
    tok = tree.node
    if tok.kind == "slot":
        return qmap.value_of(tok.symbol)
    if tok.kind == "constant":
        return tok.symbol
    return apply_operator(tok.symbol, evaluate(tree.left, qmap), evaluate(tree.right, qmap))


def answers_match(a: float, b: float) -> bool:
    return abs(a - b) <= ANSWER_RTOL * max(1.0, abs(b))


# --------------------------------------------------------------------------
# quantity abstraction

_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?%?")
_WORD_RE = re.compile(r"\d+(?:\.\d+)?%?|[^\W\d_]+(?:'[^\W\d_]+)?|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text)


def abstract_quantities(text: str, max_slots: int = MAX_SLOTS) -> tuple[list[str], QuantityMap]:
    """Replace every number in ``text`` by ``N1, N2, ...`` in occurrence order."""
    out: list[str] = []
    quantities: list[Quantity] = []
    for tok in tokenize(text):
        if _NUMBER_RE.fullmatch(tok):
            quantities.append(Quantity(tok, number_value(tok)))
            if len(quantities) > max_slots:
                raise CapacityError(f"more than {max_slots} numbers in problem text")
            out.append(f"N{len(quantities)}")
        else:
            out.append(tok.lower())
    return out, QuantityMap(quantities)


def is_slot_token(word: str) -> bool:
    return _SLOT_RE.match(word) is not None


def slot_index(word: str) -> int:
    return int(word[1:])
