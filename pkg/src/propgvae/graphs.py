"""Ordered directed graphs over formula ASTs, as consumed by the encoder.

Node type vocabulary of size n + 5, in feature order: START, END, AND, OR,
NOT, x1..xn.  The constant `1` is parsed and evaluated elsewhere but is not
part of the learned vocabulary.  Nodes are stored in pre-order (left child
first), which is a topological order for the parent-to-child edges; a single
virtual END node is appended and receives one edge from every leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formulas import AND, NOT, OR, TRUE, VAR, Formula, FormulaError

START_ID = 0
END_ID = 1
AND_ID = 2
OR_ID = 3
NOT_ID = 4
FIRST_VAR_ID = 5

_OP_TO_TYPE = {AND: AND_ID, OR: OR_ID, NOT: NOT_ID}
_TYPE_TO_OP = {AND_ID: AND, OR_ID: OR, NOT_ID: NOT}


def vocab_size(n: int) -> int:
    return n + 5


def type_id_of(f: Formula, n: int, anonymous_as_first_var: bool = False) -> int:
    if f.op == TRUE:
        raise FormulaError("the constant 1 has no learned node type")
    if f.op == VAR:
        if f.index == 0:
            if anonymous_as_first_var:
                return FIRST_VAR_ID
            raise FormulaError("anonymous variable has no node type")
        if f.index > n:
            raise FormulaError(f"variable x{f.index} exceeds the configured count {n}")
        return FIRST_VAR_ID - 1 + f.index
    return _OP_TO_TYPE[f.op]


def type_arity(type_id: int, n: int) -> int:
    if type_id in (AND_ID, OR_ID):
        return 2
    if type_id == NOT_ID:
        return 1
    if FIRST_VAR_ID <= type_id < FIRST_VAR_ID + n:
        return 0
    raise FormulaError(f"type {type_id} is structural and has no arity")


def op_of_type(type_id: int) -> str:
    if type_id not in _TYPE_TO_OP:
        raise FormulaError(f"type {type_id} is not an operator")
    return _TYPE_TO_OP[type_id]


def type_label(type_id: int, n: int) -> str:
    labels = {START_ID: "START", END_ID: "END", AND_ID: "AND", OR_ID: "OR", NOT_ID: "NOT"}
    if type_id in labels:
        return labels[type_id]
    if FIRST_VAR_ID <= type_id < FIRST_VAR_ID + n:
        return f"x{type_id - FIRST_VAR_ID + 1}"
    raise FormulaError(f"unknown type id {type_id}")


@dataclass(frozen=True)
class AstGraph:
    """Formula AST plus virtual END sink, with both edge directions.

    ``reverse_edges`` is the forward set flipped: in that direction the END
    node is the unique source feeding the leaves and the root is the sink.
    """

    type_ids: tuple[int, ...]
    forward_edges: tuple[tuple[int, int], ...]
    n_vars: int

    @property
    def end_id(self) -> int:
        return len(self.type_ids) - 1

    @property
    def root_id(self) -> int:
        return 0

    @property
    def reverse_edges(self) -> tuple[tuple[int, int], ...]:
        return tuple((b, a) for a, b in self.forward_edges)

    def features(self) -> np.ndarray:
        """One-hot node features, shape (num_nodes, n_vars + 5)."""
        out = np.zeros((len(self.type_ids), vocab_size(self.n_vars)))
        out[np.arange(len(self.type_ids)), list(self.type_ids)] = 1.0
        return out

    def predecessors(self, reverse: bool = False) -> tuple[tuple[int, ...], ...]:
        """In-neighbor lists per node for the chosen direction."""
        edges = self.reverse_edges if reverse else self.forward_edges
        preds: list[list[int]] = [[] for _ in self.type_ids]
        for a, b in edges:
            preds[b].append(a)
        return tuple(tuple(p) for p in preds)

    def topo_order(self, reverse: bool = False) -> tuple[int, ...]:
        """Storage order (pre-order) for the forward direction, reversed
        otherwise; both are topological for the respective edge set."""
        order = range(len(self.type_ids))
        return tuple(reversed(order)) if reverse else tuple(order)


def to_ast_graph(f: Formula, n: int, anonymous_as_first_var: bool = False) -> AstGraph:
    """Pre-order node list (left child first) plus the virtual END node with
    one in-edge per leaf."""
    types: list[int] = []
    edges: list[tuple[int, int]] = []
    leaves: list[int] = []

    stack: list[tuple[Formula, int | None]] = [(f, None)]
    while stack:
        node_f, parent = stack.pop()
        node = len(types)
        types.append(type_id_of(node_f, n, anonymous_as_first_var))
        if parent is not None:
            edges.append((parent, node))
        if not node_f.args:
            leaves.append(node)
        for c in reversed(node_f.args):
            stack.append((c, node))
    end = len(types)
    types.append(END_ID)
    for leaf in leaves:
        edges.append((leaf, end))
    return AstGraph(tuple(types), tuple(edges), n)


def formula_of_preorder(type_ids: list[int], n: int) -> Formula | None:
    """Rebuild a formula from a pre-order type sequence; None if the sequence
    is not exactly one well-formed tree."""
    pos = 0

    def build() -> Formula | None:
        nonlocal pos
        if pos >= len(type_ids):
            return None
        t = type_ids[pos]
        pos += 1
        if FIRST_VAR_ID <= t < FIRST_VAR_ID + n:
            return Formula(VAR, index=t - FIRST_VAR_ID + 1)
        if t not in _TYPE_TO_OP:
            return None
        children = []
        for _ in range(type_arity(t, n)):
            c = build()
            if c is None:
                return None
            children.append(c)
        return Formula(_TYPE_TO_OP[t], tuple(children))

    out = build()
    if out is None or pos != len(type_ids):
        return None
    return out


def dot_body(g: AstGraph, prefix: str = "n") -> list[str]:
    """Node and edge statements, with colors keyed by type class."""
    lines = []
    for i, t in enumerate(g.type_ids):
        label = type_label(t, g.n_vars)
        if t in (START_ID, END_ID):
            color = "gray80"
        elif t in (AND_ID, OR_ID, NOT_ID):
            color = "lightblue"
        else:
            color = "palegreen"
        lines.append(f'{prefix}{i} [label="{label}", style=filled, fillcolor={color}];')
    for a, b in g.forward_edges:
        lines.append(f"{prefix}{a} -> {prefix}{b};")
    return lines


def to_dot(g: AstGraph, name: str = "ast") -> str:
    """Graphviz digraph; node color keyed by type class."""
    return "\n".join([f"digraph {name} {{"] + ["  " + s for s in dot_body(g)] + ["}"])
