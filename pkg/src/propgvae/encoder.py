"""Asynchronous message-passing encoders over formula AST graphs.

Within one sweep, nodes are visited in topological order and each update
reads only the states of predecessors already updated in that sweep (the
node's own contribution, where the cell uses one, comes from the previous
sweep).  Three cells are supported:

* ``gru``  - the node's one-hot type feeds a GRU whose hidden input is a
  gated sum of predecessor states; the node's own state is not used.
* ``gcn``  - convolution over the processed in-neighbors plus a self loop,
  normalized by 1/sqrt(d_v d_w) with degrees taken over that same set.
* ``gat``  - attention over the node and its processed in-neighbors, logits
  LeakyReLU(a.(W h_v + W h_w)); heads are concatenated in internal layers
  and averaged in the last one.

The encoder output is the state of the virtual END node; bidirectional mode
repeats the sweeps over the reversed edges with separate parameters (where
the END node is the source and the root the terminal) and concatenates both
terminal states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Var
from .errors import ConfigError
from .graphs import AstGraph, vocab_size


@dataclass(frozen=True)
class EncoderConfig:
    cell: str = "gru"
    layers: int = 1
    gat_heads: tuple[int, ...] = ()
    bidirectional: bool = True
    hidden_size: int = 64
    latent_size: int = 16
    n_vars: int = 3

    def validate(self) -> None:
        if self.cell not in ("gru", "gcn", "gat"):
            raise ConfigError(f"unknown encoder cell {self.cell!r}")
        if self.layers < 1:
            raise ConfigError("encoder needs at least one sweep")
        if self.cell == "gat" and len(self.gat_heads) != self.layers:
            raise ConfigError("gat_heads must list one head count per layer")
        if self.cell == "gat" and any(h < 1 for h in self.gat_heads):
            raise ConfigError("head counts must be positive")
        if min(self.hidden_size, self.latent_size, self.n_vars) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def out_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)


def default_encoder_config(cell: str, n_vars: int, hidden_size: int = 64,
                           latent_size: int = 16,
                           bidirectional: bool = True) -> EncoderConfig:
    """Reference layer layouts: 1 GRU sweep, 2 GCN layers, 3 GAT layers with
    (3, 3, 4) heads."""
    layers = {"gru": 1, "gcn": 2, "gat": 3}[cell]
    heads = (3, 3, 4) if cell == "gat" else ()
    return EncoderConfig(cell=cell, layers=layers, gat_heads=heads,
                         bidirectional=bidirectional, hidden_size=hidden_size,
                         latent_size=latent_size, n_vars=n_vars)


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def _gat_head_dims(cfg: EncoderConfig, layer: int) -> list[int]:
    """Output width per head; every layer maps hidden_size to hidden_size.

    Internal layers concatenate their heads, so the hidden size is split
    across them as evenly as possible; the final layer averages heads of
    full width instead.
    """
    heads = cfg.gat_heads[layer]
    if layer == cfg.layers - 1:
        return [cfg.hidden_size] * heads
    base, extra = divmod(cfg.hidden_size, heads)
    return [base + (1 if k < extra else 0) for k in range(heads)]


def init_encoder_params(params: ModelParams, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    cfg.validate()
    h = cfg.hidden_size
    d = vocab_size(cfg.n_vars)
    directions = ["fwd", "bwd"] if cfg.bidirectional else ["fwd"]
    for direction in directions:
        base = f"enc.{direction}"
        if cfg.cell in ("gcn", "gat"):
            params.add(f"{base}.in.W", _glorot(rng, h, d))
            params.add(f"{base}.in.b", np.zeros(h))
        for layer in range(cfg.layers):
            lbase = f"{base}.l{layer}"
            if cfg.cell == "gru":
                params.add(f"{lbase}.gru.W", _glorot(rng, 3 * h, d))
                params.add(f"{lbase}.gru.U", _glorot(rng, 3 * h, h))
                params.add(f"{lbase}.gru.bx", np.zeros(3 * h))
                params.add(f"{lbase}.gru.bh", np.zeros(3 * h))
                params.add(f"{lbase}.gate.W", _glorot(rng, h, h))
                params.add(f"{lbase}.gate.b", np.zeros(h))
                params.add(f"{lbase}.map.W", _glorot(rng, h, h))
                params.add(f"{lbase}.map.b", np.zeros(h))
            elif cfg.cell == "gcn":
                params.add(f"{lbase}.gcn.W", _glorot(rng, h, h))
            else:
                dims = _gat_head_dims(cfg, layer)
                if min(dims) < 1:
                    raise ConfigError(
                        f"layer {layer}: {cfg.gat_heads[layer]} heads cannot "
                        f"share a hidden size of {h}"
                    )
                for head, dim in enumerate(dims):
                    params.add(f"{lbase}.h{head}.W", _glorot(rng, dim, h))
                    params.add(f"{lbase}.h{head}.a", _glorot(rng, dim, 1)[:, 0])


@dataclass
class DependencyRecord:
    """One node update: which predecessor states (current sweep) were read."""

    direction: str
    layer: int
    node: int
    reads: tuple[int, ...]


def encode_states(
    graph: AstGraph,
    params: ModelParams,
    cfg: EncoderConfig,
    recorder: list[DependencyRecord] | None = None,
) -> tuple[Var, list[Var], list[Var] | None]:
    """Run the sweeps; returns (out_e, forward node states, backward states)."""
    cfg.validate()
    if graph.n_vars != cfg.n_vars:
        raise ConfigError(
            f"graph built for n={graph.n_vars} but encoder configured for n={cfg.n_vars}"
        )
    feats = graph.features()
    fwd_states = _run_direction(graph, params, cfg, feats, "fwd", recorder)
    bwd_states = None
    if cfg.bidirectional:
        bwd_states = _run_direction(graph, params, cfg, feats, "bwd", recorder)
        out = ad.concat([fwd_states[graph.end_id], bwd_states[graph.root_id]])
    else:
        out = fwd_states[graph.end_id]
    return out, fwd_states, bwd_states


def encode(graph: AstGraph, params: ModelParams, cfg: EncoderConfig,
           recorder: list[DependencyRecord] | None = None) -> Var:
    out, _, _ = encode_states(graph, params, cfg, recorder)
    return out


def _run_direction(graph, params, cfg, feats, direction, recorder) -> list[Var]:
    reverse = direction == "bwd"
    order = graph.topo_order(reverse)
    preds = graph.predecessors(reverse)
    base = f"enc.{direction}"
    num = len(graph.type_ids)
    onehots = [ad.const(feats[v]) for v in range(num)]

    if cfg.cell in ("gcn", "gat"):
        w_in, b_in = params[f"{base}.in.W"], params[f"{base}.in.b"]
        prev: list[Var] = [ad.linear(w_in, onehots[v], b_in) for v in range(num)]
    else:
        prev = [ad.const(np.zeros(cfg.hidden_size)) for _ in range(num)]

    for layer in range(cfg.layers):
        lbase = f"{base}.l{layer}"
        cur: list[Var | None] = [None] * num
        for v in order:
            pred_states = [cur[w] for w in preds[v]]
            if recorder is not None:
                recorder.append(DependencyRecord(direction, layer, v, tuple(preds[v])))
            if cfg.cell == "gru":
                agg = ad.gated_sum(
                    pred_states,
                    params[f"{lbase}.gate.W"], params[f"{lbase}.gate.b"],
                    params[f"{lbase}.map.W"], params[f"{lbase}.map.b"],
                )
                cur[v] = ad.gru_cell(
                    onehots[v], agg,
                    params[f"{lbase}.gru.W"], params[f"{lbase}.gru.U"],
                    params[f"{lbase}.gru.bx"], params[f"{lbase}.gru.bh"],
                )
            elif cfg.cell == "gcn":
                cur[v] = _gcn_update(params[f"{lbase}.gcn.W"], prev[v],
                                     pred_states, preds, v)
            else:
                cur[v] = _gat_update(params, lbase, cfg, layer, prev[v], pred_states)
        prev = cur  # type: ignore[assignment]
    return prev  # type: ignore[return-value]


def _gcn_update(w: Var, self_prev: Var, pred_states: list[Var], preds, v: int) -> Var:
    # Degrees over the processed in-neighborhood plus the self loop.  The
    # predecessor terms are summed before the self term so that swapping two
    # sibling predecessors only commutes a pairwise addition.
    d_v = len(preds[v]) + 1
    acc: Var | None = None
    for w_id, state in zip(preds[v], pred_states):
        d_w = len(preds[w_id]) + 1
        term = ad.scale(state, 1.0 / np.sqrt(d_v * d_w))
        acc = term if acc is None else ad.add(acc, term)
    self_term = ad.scale(self_prev, 1.0 / d_v)
    total = self_term if acc is None else ad.add(acc, self_term)
    return ad.tanh(ad.matmul(w, total))


def _gat_update(params: ModelParams, lbase: str, cfg: EncoderConfig,
                layer: int, self_prev: Var, pred_states: list[Var]) -> Var:
    heads = cfg.gat_heads[layer]
    final = layer == cfg.layers - 1
    head_outs: list[Var] = []
    for head in range(heads):
        w = params[f"{lbase}.h{head}.W"]
        a = params[f"{lbase}.h{head}.a"]
        # Attention over the node itself plus its processed in-neighbors.
        projected = [ad.matmul(w, self_prev)] + [ad.matmul(w, s) for s in pred_states]
        u_self = projected[0]
        logits = [ad.leaky_relu(ad.matmul(a, ad.add(u_self, u)), 0.2) for u in projected]
        att = ad.softmax(_stack_scalars(logits))
        mixed = ad.matmul(att, ad.stack_rows(projected))
        head_outs.append(mixed)
    if final:
        acc = head_outs[0]
        for extra in head_outs[1:]:
            acc = ad.add(acc, extra)
        return ad.tanh(ad.scale(acc, 1.0 / heads))
    return ad.concat([ad.tanh(h) for h in head_outs])


def _stack_scalars(scalars: list[Var]) -> Var:
    parts = []
    for s in scalars:
        if s.value.ndim == 0:
            parts.append(_as_vector(s))
        else:
            parts.append(s)
    return ad.concat(parts)


def _as_vector(s: Var) -> Var:
    def back(g):
        return ((s, np.asarray(g.sum())),)

    return Var(s.value.reshape(1), (s,), back, op="as_vector")


# ---------------------------------------------------------------------------
# Posterior and conditional prior heads
# ---------------------------------------------------------------------------


@dataclass
class PosteriorGaussian:
    mu: Var
    logvar: Var


def init_posterior_params(params: ModelParams, cfg: EncoderConfig,
                          context_size: int, rng: np.random.Generator) -> None:
    h = cfg.hidden_size
    in_size = cfg.out_size + context_size
    for head in ("mu", "logvar"):
        params.add(f"post.{head}.W1", _glorot(rng, h, in_size))
        params.add(f"post.{head}.b1", np.zeros(h))
        params.add(f"post.{head}.W2", _glorot(rng, cfg.latent_size, h))
        params.add(f"post.{head}.b2", np.zeros(cfg.latent_size))


def posterior(out_e: Var, y: np.ndarray | None, params: ModelParams) -> PosteriorGaussian:
    """Two single-hidden-layer heads over [out_e || y]."""
    inp = ad.concat([out_e, ad.const(y)]) if y is not None else out_e
    heads = []
    for head in ("mu", "logvar"):
        hidden = ad.tanh(ad.linear(params[f"post.{head}.W1"], inp,
                                   params[f"post.{head}.b1"]))
        heads.append(ad.linear(params[f"post.{head}.W2"], hidden,
                               params[f"post.{head}.b2"]))
    return PosteriorGaussian(heads[0], heads[1])


def init_prior_params(params: ModelParams, cfg: EncoderConfig,
                      context_size: int, rng: np.random.Generator) -> None:
    h = cfg.hidden_size
    params.add("prior.W1", _glorot(rng, h, context_size))
    params.add("prior.b1", np.zeros(h))
    for head in ("mu", "logvar"):
        params.add(f"prior.{head}.W", _glorot(rng, cfg.latent_size, h))
        params.add(f"prior.{head}.b", np.zeros(cfg.latent_size))


def prior_conditional(y: np.ndarray, params: ModelParams) -> PosteriorGaussian:
    """Parametric Gaussian prior over the latent, as a function of y."""
    if "prior.W1" not in params:
        raise ConfigError("conditional prior requested on an unconditional model")
    hidden = ad.tanh(ad.linear(params["prior.W1"], ad.const(y), params["prior.b1"]))
    return PosteriorGaussian(
        ad.linear(params["prior.mu.W"], hidden, params["prior.mu.b"]),
        ad.linear(params["prior.logvar.W"], hidden, params["prior.logvar.b"]),
    )


def standard_prior(latent_size: int) -> PosteriorGaussian:
    return PosteriorGaussian(ad.const(np.zeros(latent_size)),
                             ad.const(np.zeros(latent_size)))
