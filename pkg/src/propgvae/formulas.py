"""Propositional formulae: AST, surface syntax, semantics and random generation.

The surface grammar, with '&' binding tighter than '|' and binary operators
associating to the left::

    formula := disj
    disj    := conj ('|' conj)*
    conj    := unary ('&' unary)*
    unary   := '~' unary | atom
    atom    := 'x'INT | '1' | '(' formula ')'

Valuations follow the +1/-1 sign convention: ``evaluate`` returns +1 when the
formula is satisfied by an assignment and -1 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

AND = "and"
OR = "or"
NOT = "not"
VAR = "var"
TRUE = "true"

ARITY = {AND: 2, OR: 2, NOT: 1, VAR: 0, TRUE: 0}

#: Operators eligible for random generation (the constant is never generated).
OPERATORS = (AND, OR, NOT)

#: Hard cap for exhaustive assignment enumeration.
MAX_ENUM_VARS = 20


class FormulaError(ValueError):
    """Structurally invalid formula or assignment."""


class ParseError(FormulaError):
    """Syntax error; carries the character offset where parsing failed."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EnumerationOverflowError(FormulaError):
    """Raised when 2**n assignments would be enumerated for too large an n.

    Callers hitting this should switch to the Monte Carlo signature mode.
    """


@dataclass(frozen=True)
class Formula:
    """Immutable AST node; the whole formula is the root of such a tree.

    ``index`` is only meaningful for ``op == "var"``; index 0 is the anonymous
    placeholder produced by :func:`strip_indexes`.
    """

    op: str
    args: tuple["Formula", ...] = ()
    index: int = 0

    def __post_init__(self):
        if self.op not in ARITY:
            raise FormulaError(f"unknown operator {self.op!r}")
        if len(self.args) != ARITY[self.op]:
            raise FormulaError(
                f"{self.op} expects {ARITY[self.op]} children, got {len(self.args)}"
            )
        if self.op == VAR and self.index < 0:
            raise FormulaError(f"negative variable index {self.index}")
        if self.op != VAR and self.index != 0:
            raise FormulaError(f"{self.op} node cannot carry a variable index")

    def __str__(self) -> str:
        return print_canonical(self)


TRUE_FORMULA = Formula(TRUE)


def var(i: int) -> Formula:
    return Formula(VAR, index=i)


def neg(f: Formula) -> Formula:
    return Formula(NOT, (f,))


def conj(left: Formula, right: Formula) -> Formula:
    return Formula(AND, (left, right))


def disj(left: Formula, right: Formula) -> Formula:
    return Formula(OR, (left, right))


# ---------------------------------------------------------------------------
# Parsing and printing
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.pos = 0

    def error(self, message: str) -> ParseError:
        return ParseError(message, self.pos)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def disj(self) -> Formula:
        f = self.conj()
        while self.peek() == "|":
            self.pos += 1
            f = Formula(OR, (f, self.conj()))
        return f

    def conj(self) -> Formula:
        f = self.unary()
        while self.peek() == "&":
            self.pos += 1
            f = Formula(AND, (f, self.unary()))
        return f

    def unary(self) -> Formula:
        if self.peek() == "~":
            self.pos += 1
            return Formula(NOT, (self.unary(),))
        return self.atom()

    def atom(self) -> Formula:
        c = self.peek()
        if c == "(":
            self.pos += 1
            f = self.disj()
            if self.peek() != ")":
                raise self.error("expected ')'")
            self.pos += 1
            return f
        if c == "1":
            self.pos += 1
            return TRUE_FORMULA
        if c == "x":
            start = self.pos
            self.pos += 1
            digits = ""
            while self.pos < len(self.text) and self.text[self.pos].isdigit():
                digits += self.text[self.pos]
                self.pos += 1
            if not digits:
                self.pos = start
                raise self.error("variable needs an index, e.g. x1")
            i = int(digits)
            if i < 1 or i > self.n:
                self.pos = start
                raise self.error(f"variable index {i} out of range [1, {self.n}]")
            return Formula(VAR, index=i)
        if c == "":
            raise self.error("unexpected end of input")
        raise self.error(f"unexpected character {c!r}")


def parse(text: str, n: int) -> Formula:
    """Parse ``text`` over variables x1..xn; raises :class:`ParseError`."""
    p = _Parser(text, n)
    f = p.disj()
    if p.peek() != "":
        raise p.error(f"trailing input {p.peek()!r}")
    return f


def print_canonical(f: Formula) -> str:
    """Fully parenthesized canonical text; two formulae are structurally equal
    iff their canonical strings are equal."""
    if f.op == VAR:
        return f"x{f.index}" if f.index > 0 else "VAR"
    if f.op == TRUE:
        return "1"
    if f.op == NOT:
        return "~" + print_canonical(f.args[0])
    sym = "&" if f.op == AND else "|"
    return f"({print_canonical(f.args[0])} {sym} {print_canonical(f.args[1])})"


# ---------------------------------------------------------------------------
# Semantics
# ---------------------------------------------------------------------------


def evaluate(f: Formula, assignment: Sequence[int]) -> int:
    """Valuation of ``f`` under ``assignment`` (bit j-1 is the value of x_j);
    returns +1 if satisfied, -1 otherwise."""
    if f.op == TRUE:
        return 1
    if f.op == VAR:
        if f.index < 1 or f.index > len(assignment):
            raise FormulaError(
                f"assignment of length {len(assignment)} does not cover x{f.index}"
            )
        return 1 if assignment[f.index - 1] else -1
    if f.op == NOT:
        return -evaluate(f.args[0], assignment)
    a = evaluate(f.args[0], assignment)
    b = evaluate(f.args[1], assignment)
    if f.op == AND:
        return 1 if (a == 1 and b == 1) else -1
    return 1 if (a == 1 or b == 1) else -1


def enumerate_assignments(n: int) -> list[tuple[int, ...]]:
    """All 2**n assignments; entry i sets x_j to bit ``(i >> (j-1)) & 1``."""
    return [tuple(int(b) for b in row) for row in assignment_matrix(n)]


def assignment_matrix(n: int) -> np.ndarray:
    """The enumeration of :func:`enumerate_assignments` as a (2**n, n) 0/1 array."""
    if n > MAX_ENUM_VARS:
        raise EnumerationOverflowError(
            f"2**{n} assignments exceed the enumeration guard (n <= {MAX_ENUM_VARS}); "
            "use the Monte Carlo signature mode"
        )
    if n < 1:
        raise FormulaError("need at least one variable")
    idx = np.arange(2**n, dtype=np.uint32)[:, None]
    cols = np.arange(n, dtype=np.uint32)[None, :]
    return ((idx >> cols) & 1).astype(np.uint8)


def satisfaction(f: Formula, bits: np.ndarray) -> np.ndarray:
    """Vectorized satisfaction over a (m, n) 0/1 assignment matrix -> (m,) bool."""
    if f.op == TRUE:
        return np.ones(bits.shape[0], dtype=bool)
    if f.op == VAR:
        if f.index < 1 or f.index > bits.shape[1]:
            raise FormulaError(f"assignments of width {bits.shape[1]} do not cover x{f.index}")
        return bits[:, f.index - 1].astype(bool)
    if f.op == NOT:
        return ~satisfaction(f.args[0], bits)
    a = satisfaction(f.args[0], bits)
    b = satisfaction(f.args[1], bits)
    return (a & b) if f.op == AND else (a | b)


# ---------------------------------------------------------------------------
# Structure helpers
# ---------------------------------------------------------------------------


def structural_equal(a: Formula, b: Formula) -> bool:
    """Exact recursive equality, including variable indexes and child order."""
    return a == b


def node_count(f: Formula) -> int:
    return 1 + sum(node_count(c) for c in f.args)


def depth(f: Formula) -> int:
    """Edges on the longest root-to-leaf path."""
    if not f.args:
        return 0
    return 1 + max(depth(c) for c in f.args)


def variables_of(f: Formula) -> set[int]:
    if f.op == VAR:
        return {f.index}
    out: set[int] = set()
    for c in f.args:
        out |= variables_of(c)
    return out


def strip_indexes(f: Formula) -> Formula:
    """Replace every variable with the anonymous index-0 placeholder."""
    if f.op == VAR:
        return Formula(VAR, index=0)
    return Formula(f.op, tuple(strip_indexes(c) for c in f.args))


def reindex(f: Formula, indexes: Sequence[int]) -> Formula:
    """Rebuild ``f`` assigning ``indexes`` to its leaves in left-to-right order."""
    it = iter(indexes)

    def go(g: Formula) -> Formula:
        if g.op == VAR:
            try:
                return Formula(VAR, index=next(it))
            except StopIteration:
                raise FormulaError("fewer indexes than leaves") from None
        return Formula(g.op, tuple(go(c) for c in g.args))

    out = go(f)
    if next(it, None) is not None:
        raise FormulaError("more indexes than leaves")
    return out


def leaves_in_order(f: Formula) -> list[Formula]:
    """Variable leaves in left-to-right (pre-order) order."""
    if f.op == VAR:
        return [f]
    out: list[Formula] = []
    for c in f.args:
        out.extend(leaves_in_order(c))
    return out


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """Recursive growing scheme settings; trees larger than ``max_nodes`` are
    rejected and resampled."""

    n: int
    p_leaf: float = 0.4
    max_nodes: int = 30
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.p_leaf < 1.0:
            raise FormulaError(f"p_leaf must lie in (0, 1), got {self.p_leaf}")
        if self.n < 1:
            raise FormulaError("variable count must be >= 1")
        if self.max_nodes < 3:
            raise FormulaError("max_nodes must be >= 3")


@dataclass
class GeneratorStats:
    """Counters over raw categorical draws, including draws in rejected trees."""

    slots: int = 0
    leaf_slots: int = 0
    accepted: int = 0
    rejected: int = 0

    @property
    def leaf_fraction(self) -> float:
        return self.leaf_slots / self.slots if self.slots else float("nan")


def _draw_slot(p_leaf: float, rng: np.random.Generator) -> str:
    u = rng.random()
    if u < p_leaf:
        return VAR
    return OPERATORS[int((u - p_leaf) / (1.0 - p_leaf) * 3.0) % 3]


def generate_formula(
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    stats: GeneratorStats | None = None,
) -> Formula:
    """One random formula: root uniform over {and, or, not}; every expanded
    slot is a leaf with probability p_leaf, otherwise a uniform operator;
    variable indexes uniform on [1, n]."""
    cfg.validate()
    while True:
        f = _grow_once(cfg, rng, stats)
        if f is not None:
            if stats is not None:
                stats.accepted += 1
            return f
        if stats is not None:
            stats.rejected += 1


def _grow_once(
    cfg: GeneratorConfig, rng: np.random.Generator, stats: GeneratorStats | None
) -> Formula | None:
    # Mutable node: [op, var_index, children]; FIFO expansion order.
    root = [OPERATORS[int(rng.integers(0, 3))], 0, []]
    queue = [root]
    count = 1
    while queue:
        node = queue.pop(0)
        op = node[0]
        if op == VAR:
            node[1] = int(rng.integers(1, cfg.n + 1))
            continue
        for _ in range(ARITY[op]):
            child_op = _draw_slot(cfg.p_leaf, rng)
            if stats is not None:
                stats.slots += 1
                if child_op == VAR:
                    stats.leaf_slots += 1
            child = [child_op, 0, []]
            node[2].append(child)
            queue.append(child)
            count += 1
            if count > cfg.max_nodes:
                return None
    return _freeze(root)


def _freeze(node: list) -> Formula:
    op, index, children = node
    if op == VAR:
        return Formula(VAR, index=index)
    return Formula(op, tuple(_freeze(c) for c in children))


def sample_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent per-item generator so work items parallelize reproducibly."""
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

_HEADER_INT_KEYS = {"n", "max_nodes", "seed", "count"}
_HEADER_FLOAT_KEYS = {"p_leaf"}


def write_dataset(path: str, formulas: Sequence[Formula], meta: dict) -> None:
    """One canonical formula per line; '#' header lines record the metadata."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        for f in formulas:
            fh.write(print_canonical(f) + "\n")


def read_dataset(path: str, n: int | None = None) -> tuple[list[Formula], dict]:
    meta: dict = {}
    formulas: list[Formula] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    key = key.strip()
                    value = value.strip()
                    if key in _HEADER_INT_KEYS:
                        meta[key] = int(value)
                    elif key in _HEADER_FLOAT_KEYS:
                        meta[key] = float(value)
                    else:
                        meta[key] = value
                continue
            width = n if n is not None else meta.get("n")
            if width is None:
                raise DataError(f"{path}: no 'n' header and no explicit variable count")
            try:
                formulas.append(parse(line, width))
            except ParseError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return formulas, meta
