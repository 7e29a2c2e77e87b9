"""Optimization of the VAE / CVAE objectives with teacher forcing.

Per formula the loss is the teacher-forced reconstruction NLL plus the
KL-weighted divergence between the approximate posterior and the prior
(standard normal, or the parametric conditional prior in cvae mode).  Batch
gradients are means over formulae, validation runs on a fixed held-out slice
every ``validate_every`` epochs, and training stops once the best validation
loss has failed to improve by ``min_improvement`` for ``patience``
consecutive checkpoints.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from .autodiff import Adam, ModelParams, Var, backward
from .encoder import EncoderConfig, PosteriorGaussian
from .errors import ConfigError
from .formulas import (
    Formula,
    assignment_matrix,
    leaves_in_order,
    reindex,
    satisfaction,
    strip_indexes,
)
from .graphs import FIRST_VAR_ID, to_ast_graph
from .gvae import CVAE, VAE, GvaeModel, ModelConfig, init_model_params
from .semantics import PcaModel, embed, embed_many


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1e-3
    lr: float = 1e-3
    batch_size: int = 32
    validate_every: int = 30
    patience: int = 3
    max_epochs: int = 300
    seed: int = 0
    mode: str = VAE
    hierarchical: bool = False
    lam: float = 0.7
    min_improvement: float = 1e-3

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.validate_every < 1:
            raise ConfigError("batch size, epochs and validation cadence must be positive")
        if self.mode not in (VAE, CVAE):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    nll: float
    kl: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: GvaeModel
    history: list[EpochStats]
    best_val: float
    stopped_epoch: int
    val_indexes: list[int] = field(default_factory=list)


def elbo_loss(trace: dec.DecodeTrace, q: PosteriorGaussian,
              prior: PosteriorGaussian, beta: float) -> Var:
    """Reconstruction NLL plus beta-weighted KL(q || prior); minimized."""
    return ad.add(trace.nll, ad.scale(ad.gaussian_kl(q.mu, q.logvar, prior.mu, prior.logvar), beta))


def formula_elbo(
    model: GvaeModel,
    f: Formula,
    y: np.ndarray | None,
    beta: float,
    rng: np.random.Generator,
) -> tuple[Var, float, float]:
    """Teacher-forced ELBO of one formula; returns (loss, nll, kl) with the
    latter two detached as floats."""
    q = model.posterior_for(f, y)
    z = ad.reparameterize(q.mu, q.logvar, rng)
    trace = model.decode_trace(z, y=y, teacher=f)
    if model.config.mode == CVAE:
        prior = enc.prior_conditional(y, model.params)
    else:
        prior = enc.standard_prior(model.config.encoder.latent_size)
    kl = ad.gaussian_kl(q.mu, q.logvar, prior.mu, prior.logvar)
    loss = ad.add(trace.nll, ad.scale(kl, beta))
    return loss, float(trace.nll.value), float(kl.value)


def evaluate_loss(
    model: GvaeModel,
    formulas: list[Formula],
    contexts: np.ndarray | None,
    beta: float,
    seed: int,
) -> float:
    """Mean ELBO with per-formula derived noise streams; bitwise reproducible
    for a fixed seed and fixed parameters."""
    total = 0.0
    for i, f in enumerate(formulas):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        y = None if contexts is None else contexts[i]
        loss, _, _ = formula_elbo(model, f, y, beta, rng)
        total += float(loss.value)
    return total / max(len(formulas), 1)


def train(
    dataset: list[Formula],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    pca: PcaModel | None = None,
    max_v: int = 30,
    condition_posterior: bool = True,
) -> TrainResult:
    cfg.validate()
    enc_cfg.validate()
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    if cfg.mode == CVAE and pca is None:
        raise ConfigError("cvae training needs a fitted kernel-PCA model")
    if cfg.hierarchical:
        # First hierarchical stage: learn to reconstruct the simplified ASTs
        # (all leaves one anonymous variable type); indexes are recovered
        # separately by index_recovery_train.
        if enc_cfg.n_vars != 1:
            raise ConfigError("hierarchical training uses n_vars=1 (one anonymous leaf type)")
        dataset = [_anonymize(f) for f in dataset]

    model_cfg = ModelConfig(
        encoder=enc_cfg,
        mode=cfg.mode,
        context_size=pca.k if cfg.mode == CVAE else 0,
        condition_posterior=condition_posterior,
        max_v=max_v,
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA11)))
    params = init_model_params(model_cfg, rng)
    model = GvaeModel(model_cfg, params)
    opt = Adam(params, lr=cfg.lr)

    contexts = embed_many(dataset, pca) if cfg.mode == CVAE else None

    order = rng.permutation(len(dataset))
    n_val = max(1, len(dataset) // 10) if len(dataset) > 1 else 0
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]
    if not train_idx:
        train_idx, val_idx = val_idx, []
    val_set = [dataset[i] for i in val_idx]
    val_ctx = contexts[val_idx] if contexts is not None else None

    history: list[EpochStats] = []
    best_val = float("inf")
    best_params: ModelParams | None = None
    streak = 0
    stopped = cfg.max_epochs

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(train_idx))
        epoch_loss = epoch_nll = epoch_kl = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_idx[int(j)] for j in perm[start : start + cfg.batch_size]]
            inv = 1.0 / len(batch)
            for i in batch:
                y = None if contexts is None else contexts[i]
                loss, nll, kl = formula_elbo(model, dataset[i], y, cfg.beta, rng)
                backward(ad.scale(loss, inv))
                epoch_loss += float(loss.value)
                epoch_nll += nll
                epoch_kl += kl
            opt.step()
            params.zero_grads()
        stats = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss / len(train_idx),
            nll=epoch_nll / len(train_idx),
            kl=epoch_kl / len(train_idx),
        )

        checkpoint = val_set and (epoch % cfg.validate_every == 0 or epoch == cfg.max_epochs)
        if checkpoint:
            stats.val_loss = evaluate_loss(model, val_set, val_ctx, cfg.beta,
                                           seed=cfg.seed)
            if best_val - stats.val_loss >= cfg.min_improvement:
                best_val = stats.val_loss
                best_params = params.copy()
                streak = 0
            else:
                streak += 1
            history.append(stats)
            if streak >= cfg.patience:
                stopped = epoch
                break
        else:
            history.append(stats)

    if best_params is not None:
        params.load_values(best_params)
    if best_val == float("inf"):
        best_val = history[-1].train_loss if history else float("nan")
    return TrainResult(model, history, best_val, stopped, val_idx)


def write_history_csv(history: list[EpochStats], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "nll", "kl"])
        for row in history:
            val = "" if row.val_loss is None else f"{row.val_loss:.17g}"
            writer.writerow([row.epoch, f"{row.train_loss:.17g}", val,
                             f"{row.nll:.17g}", f"{row.kl:.17g}"])


def write_run_dir(
    out_dir: str,
    result: TrainResult,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
) -> None:
    """config.json + history.csv + checkpoint/ under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    config = {"training": asdict(cfg), "encoder": asdict(enc_cfg)}
    config["encoder"]["gat_heads"] = list(enc_cfg.gat_heads)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    write_history_csv(result.history, os.path.join(out_dir, "history.csv"))
    result.model.save(os.path.join(out_dir, "checkpoint"))


# ---------------------------------------------------------------------------
# Hierarchical stage: variable-index recovery on simplified ASTs
# ---------------------------------------------------------------------------


def hier_encoder_config(hidden_size: int = 32) -> EncoderConfig:
    """Index-free ASTs share a single anonymous variable type, so the sweep
    runs over a 1-variable vocabulary."""
    return EncoderConfig(cell="gru", layers=1, bidirectional=True,
                         hidden_size=hidden_size, latent_size=1, n_vars=1)


def init_hier_params(n: int, hidden_size: int, rng: np.random.Generator) -> ModelParams:
    params = ModelParams()
    enc.init_encoder_params(params, hier_encoder_config(hidden_size), rng)
    bound = np.sqrt(6.0 / (n + 2 * hidden_size))
    params.add("hier.head.W", rng.uniform(-bound, bound, size=(n, 2 * hidden_size)))
    params.add("hier.head.b", np.zeros(n))
    return params


def _anonymize(f: Formula) -> Formula:
    """All leaves become the single learned variable type."""
    return reindex(strip_indexes(f), [1] * len(leaves_in_order(f)))


def leaf_logits(f: Formula, params: ModelParams, hidden_size: int) -> list[Var]:
    """Per-leaf index logits from a bidirectional sweep over the simplified
    AST; leaves are read in left-to-right order."""
    cfg = hier_encoder_config(hidden_size)
    graph = to_ast_graph(_anonymize(f), 1)
    _, fwd, bwd = enc.encode_states(graph, params, cfg)
    assert bwd is not None
    logits = []
    for v, t in enumerate(graph.type_ids):
        if v != graph.end_id and t >= FIRST_VAR_ID:
            state = ad.concat([fwd[v], bwd[v]])
            logits.append(ad.linear(params["hier.head.W"], state, params["hier.head.b"]))
    return logits


def soft_signature(structure: Formula, leaf_probs: list[Var], n: int) -> Var:
    """Differentiable valuation vector over all 2**n assignments.

    Each leaf's satisfaction probability is the expectation of its index
    distribution; negation, conjunction and disjunction combine probabilities
    as 1-p, p*q and p+q-p*q under leaf independence, and the result maps to
    soft +1/-1 valuations.  Exact at one-hot distributions.
    """
    bits = ad.const(assignment_matrix(n).astype(np.float64).T)  # (n, 2**n)
    it = iter(leaf_probs)

    def sat(g: Formula) -> Var:
        if g.op == "var":
            return ad.matmul(next(it), bits)
        if g.op == "true":
            return ad.const(np.ones(2**n))
        if g.op == "not":
            return ad.add_const(ad.scale(sat(g.args[0]), -1.0), 1.0)
        a = sat(g.args[0])
        b = sat(g.args[1])
        if g.op == "and":
            return ad.mul(a, b)
        return ad.sub(ad.add(a, b), ad.mul(a, b))

    prob = sat(structure)
    if next(it, None) is not None:
        raise ConfigError("more leaf distributions than leaves")
    return ad.add_const(ad.scale(prob, 2.0), -1.0)


def hier_index_loss(
    simplified: Formula,
    true_formula: Formula,
    predicted_logits: list[Var],
    lam: float,
    pca: PcaModel,
    anchor_sigs: np.ndarray | None = None,
) -> Var:
    """Mean per-leaf cross-entropy plus lam times the L2 distance between the
    true context vector and the soft-reconstruction's context vector."""
    true_leaves = leaves_in_order(true_formula)
    if len(true_leaves) != len(predicted_logits):
        raise ConfigError(
            f"{len(predicted_logits)} leaf predictions for {len(true_leaves)} leaves"
        )
    ce = None
    for logits, leaf in zip(predicted_logits, true_leaves):
        term = ad.cross_entropy_from_logits(logits, leaf.index - 1)
        ce = term if ce is None else ad.add(ce, term)
    loss = ad.scale(ce, 1.0 / len(true_leaves))
    if lam == 0.0:
        return loss
    if anchor_sigs is None:
        anchor_sigs = pca.anchor_signatures()
    y_true = embed(true_formula, pca, anchor_sigs)
    soft_vals = soft_signature(simplified, [ad.softmax(lg) for lg in predicted_logits], pca.n)
    row = ad.scale(ad.matmul(ad.const(anchor_sigs), soft_vals), 1.0 / anchor_sigs.shape[1])
    centered = ad.add_const(ad.sub(ad.sub(row, ad.const(pca.col_means)), ad.mean_(row)),
                            pca.grand_mean)
    y_hat = ad.matmul(centered, ad.const(pca.projection))
    semantic = ad.l2_norm(ad.sub(ad.const(y_true), y_hat))
    return ad.add(loss, ad.scale(semantic, lam))


def index_disagreement(true_formula: Formula, indexes: list[int], n: int) -> float:
    """Fraction of assignments where the reconstruction disagrees, by exact
    enumeration."""
    rebuilt = reindex(strip_indexes(true_formula), indexes)
    bits = assignment_matrix(n)
    return float(np.mean(satisfaction(true_formula, bits) != satisfaction(rebuilt, bits)))


def predict_indexes(f: Formula, params: ModelParams, hidden_size: int) -> list[int]:
    return [int(np.argmax(lg.value)) + 1 for lg in leaf_logits(f, params, hidden_size)]


@dataclass
class HierResult:
    params: ModelParams
    hidden_size: int
    baseline_disagreement: float
    final_disagreement: float
    losses: list[float]


def mean_disagreement(dataset: list[Formula], params: ModelParams,
                      hidden_size: int, n: int) -> float:
    return float(np.mean([
        index_disagreement(f, predict_indexes(f, params, hidden_size), n)
        for f in dataset
    ]))


def index_recovery_train(
    dataset: list[Formula],
    lam: float,
    pca: PcaModel,
    hidden_size: int = 32,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> HierResult:
    """Train the index-recovery head and report disagreement before/after."""
    if not dataset:
        raise ConfigError("index recovery needs a non-empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x41)))
    params = init_hier_params(pca.n, hidden_size, rng)
    opt = Adam(params, lr=lr)
    anchor_sigs = pca.anchor_signatures()
    baseline = mean_disagreement(dataset, params, hidden_size, pca.n)
    losses: list[float] = []
    for _ in range(epochs):
        perm = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(perm), batch_size):
            batch = perm[start : start + batch_size]
            inv = 1.0 / len(batch)
            for i in batch:
                f = dataset[int(i)]
                logits = leaf_logits(f, params, hidden_size)
                loss = hier_index_loss(strip_indexes(f), f, logits, lam, pca, anchor_sigs)
                backward(ad.scale(loss, inv))
                epoch_loss += float(loss.value)
            opt.step()
            params.zero_grads()
        losses.append(epoch_loss / len(dataset))
    final = mean_disagreement(dataset, params, hidden_size, pca.n)
    return HierResult(params, hidden_size, baseline, final, losses)
