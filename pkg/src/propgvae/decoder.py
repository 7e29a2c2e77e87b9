"""Sequential grammar-constrained decoding of formula ASTs.

One node is generated per step, expanding open child slots depth-first with
the left child first.  The type head scores the full vocabulary; in
constrained mode the structural types (START, END) are masked out and slot
bookkeeping enforces arity, so the only way to emit an invalid formula is to
hit the node budget with slots still open.  The unconstrained ablation lifts
the mask and the bookkeeping: types are emitted as a free sequence, chained
through the previously generated node, until END is sampled or the budget
runs out; the emitted sequence is then read back as a pre-order tree, which
may fail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Var
from .encoder import EncoderConfig, _glorot
from .errors import ConfigError
from .formulas import VAR as FVAR
from .formulas import Formula
from .graphs import (
    END_ID,
    FIRST_VAR_ID,
    START_ID,
    formula_of_preorder,
    op_of_type,
    type_arity,
    type_id_of,
    vocab_size,
)

SAMPLE = "sample"
GREEDY = "greedy"
TEACHER = "teacher"


def init_decoder_params(params: ModelParams, cfg: EncoderConfig,
                        context_size: int, rng: np.random.Generator) -> None:
    h = cfg.hidden_size
    d = vocab_size(cfg.n_vars)
    params.add("dec.init.W", _glorot(rng, h, cfg.latent_size + context_size))
    params.add("dec.init.b", np.zeros(h))
    params.add("dec.gru.W", _glorot(rng, 3 * h, d))
    params.add("dec.gru.U", _glorot(rng, 3 * h, h))
    params.add("dec.gru.bx", np.zeros(3 * h))
    params.add("dec.gru.bh", np.zeros(3 * h))
    params.add("dec.gate.W", _glorot(rng, h, h))
    params.add("dec.gate.b", np.zeros(h))
    params.add("dec.map.W", _glorot(rng, h, h))
    params.add("dec.map.b", np.zeros(h))
    params.add("dec.type.W1", _glorot(rng, h, h))
    params.add("dec.type.b1", np.zeros(h))
    params.add("dec.type.W2", _glorot(rng, d, h))
    params.add("dec.type.b2", np.zeros(d))


@dataclass
class DecoderState:
    """Bookkeeping of a decode in progress."""

    n_vars: int
    max_v: int
    constrained: bool
    h_graph: Var
    open_slots: list[int] = field(default_factory=list)  # parent node ids, top last
    node_types: list[int] = field(default_factory=list)
    node_states: list[Var] = field(default_factory=list)
    children: list[list[int]] = field(default_factory=list)
    step: int = 0

    @property
    def finished(self) -> bool:
        return self.step > 0 and not self.open_slots


def type_mask(state: DecoderState) -> np.ndarray:
    """Allowed types for the next node.

    Constrained decoding always allows exactly the generable types (AND, OR,
    NOT and the variables): arity is enforced by the slot stack, not by the
    mask.  The unconstrained ablation exposes the full vocabulary including
    the structural types.
    """
    mask = np.ones(vocab_size(state.n_vars), dtype=bool)
    if state.constrained:
        mask[START_ID] = False
        mask[END_ID] = False
    return mask


@dataclass
class DecodeStep:
    probs: np.ndarray  # masked, renormalized distribution over the vocabulary
    chosen: int


@dataclass
class DecodeTrace:
    steps: list[DecodeStep]
    nll: Var
    formula: Formula | None
    truncated: bool

    @property
    def valid(self) -> bool:
        return self.formula is not None

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def teacher_types(f: Formula, n: int) -> list[int]:
    """Depth-first (pre-order, left first) type sequence of a formula."""
    out = [type_id_of(f, n)]
    for c in f.args:
        out.extend(teacher_types(c, n))
    return out


def _onehot(type_id: int, size: int) -> Var:
    row = np.zeros(size)
    row[type_id] = 1.0
    return ad.const(row)


def decode(
    z,
    params: ModelParams,
    cfg: EncoderConfig,
    y: np.ndarray | None = None,
    max_v: int = 30,
    mode: str = SAMPLE,
    rng: np.random.Generator | None = None,
    teacher: Formula | None = None,
    constrained: bool = True,
) -> DecodeTrace:
    if teacher is not None:
        mode = TEACHER
    if mode == SAMPLE and rng is None:
        raise ConfigError("sample mode needs an rng")
    if mode == TEACHER and teacher is None:
        raise ConfigError("teacher mode needs a teacher formula")
    vocab = vocab_size(cfg.n_vars)
    z_var = z if isinstance(z, Var) else ad.const(z)
    zy = ad.concat([z_var, ad.const(y)]) if y is not None else z_var
    h0 = ad.tanh(ad.linear(params["dec.init.W"], zy, params["dec.init.b"]))
    h_start = ad.gru_cell(
        _onehot(START_ID, vocab), h0,
        params["dec.gru.W"], params["dec.gru.U"],
        params["dec.gru.bx"], params["dec.gru.bh"],
    )
    state = DecoderState(
        n_vars=cfg.n_vars, max_v=max_v, constrained=constrained, h_graph=h_start
    )
    state.node_types.append(START_ID)
    state.node_states.append(h_start)
    state.children.append([])
    state.open_slots.append(0)  # the root hangs off the START node

    teach = iter(teacher_types(teacher, cfg.n_vars)) if mode == TEACHER else None
    steps: list[DecodeStep] = []
    nll_terms: list[Var] = []
    truncated = False
    ended = False

    while True:
        if constrained and not state.open_slots:
            break
        if not constrained and ended:
            break
        if state.step >= max_v:
            truncated = bool(state.open_slots) if constrained else not ended
            break
        state.step += 1
        mask = type_mask(state)
        logits = ad.linear(
            params["dec.type.W2"],
            ad.tanh(ad.linear(params["dec.type.W1"], state.h_graph,
                              params["dec.type.b1"])),
            params["dec.type.b2"],
        )
        probs = ad.masked_probabilities(logits.value, mask)
        if mode == TEACHER:
            chosen = next(teach, None)
            if chosen is None:
                raise ConfigError("teacher type sequence exhausted before completion")
        elif mode == GREEDY:
            chosen = int(np.argmax(np.where(mask, probs, -1.0)))
        else:
            chosen = int(rng.choice(vocab, p=probs))
        nll_terms.append(ad.cross_entropy_from_logits(logits, chosen, mask))
        steps.append(DecodeStep(probs, chosen))

        if constrained:
            parent = state.open_slots.pop()
        else:
            parent = len(state.node_types) - 1  # chain through the previous node
            if chosen == END_ID:
                ended = True
        node_id = len(state.node_types)
        state.node_types.append(chosen)
        state.children.append([])
        state.children[parent].append(node_id)
        h_agg = ad.gated_sum(
            [state.node_states[parent]],
            params["dec.gate.W"], params["dec.gate.b"],
            params["dec.map.W"], params["dec.map.b"],
        )
        h_node = ad.gru_cell(
            _onehot(chosen, vocab), h_agg,
            params["dec.gru.W"], params["dec.gru.U"],
            params["dec.gru.bx"], params["dec.gru.bh"],
        )
        state.node_states.append(h_node)
        state.h_graph = h_node
        if constrained:
            # Depth-first, left child first: left slot must surface first.
            for _ in range(type_arity(chosen, cfg.n_vars)):
                state.open_slots.append(node_id)

    if not nll_terms:
        nll = ad.const(0.0)
    else:
        nll = nll_terms[0]
        for term in nll_terms[1:]:
            nll = ad.add(nll, term)

    formula: Formula | None = None
    if constrained and not truncated and not state.open_slots and state.step > 0:
        formula = _assemble(state)
    elif not constrained and ended:
        emitted = state.node_types[1:-1]  # drop START and the closing END
        formula = formula_of_preorder(emitted, cfg.n_vars)
    return DecodeTrace(steps, nll, formula, truncated)


def _assemble(state: DecoderState) -> Formula:
    def build(node_id: int) -> Formula:
        t = state.node_types[node_id]
        if t >= FIRST_VAR_ID:
            return Formula(FVAR, index=t - FIRST_VAR_ID + 1)
        kids = tuple(build(c) for c in state.children[node_id])
        return Formula(op_of_type(t), kids)

    root = state.children[0][0]
    return build(root)
