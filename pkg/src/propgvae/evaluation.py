"""Measurement protocols: reconstruction, prior generation, semantic
conditioning, baseline pools and latent-space interpolation.

Work items (test formulae, prior samples, contexts, curve points) draw from
independent derived RNG streams keyed by item index, so every metric is
bitwise reproducible for a fixed seed and the items could be processed in
any order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .decoder import SAMPLE
from .errors import ConfigError, NumericError
from .formulas import Formula, GeneratorConfig, generate_formula, print_canonical
from .graphs import dot_body, to_ast_graph
from .gvae import CVAE, VAE, GvaeModel, require_mode
from .semantics import PcaModel, embed, kernel, signature


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


@dataclass
class EvalReport:
    """Named metrics plus the protocol parameters that produced them."""

    name: str
    metrics: dict[str, float]
    protocol: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "metrics": self.metrics, "protocol": self.protocol},
            indent=2, sort_keys=True,
        )

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            for key in sorted(self.metrics):
                fh.write(f"{key},{self.metrics[key]:.17g}\n")


def _modal(formulas: list[Formula]) -> Formula | None:
    """Most frequent formula; ties broken by canonical-string order."""
    if not formulas:
        return None
    counts = Counter(print_canonical(f) for f in formulas)
    best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    for f in formulas:
        if print_canonical(f) == best:
            return f
    return None


def reconstruction_accuracy(
    model: GvaeModel,
    test: list[Formula],
    z_samples: int = 10,
    decodes_per_z: int = 10,
    seed: int = 0,
    pca: PcaModel | None = None,
) -> EvalReport:
    """Mean fraction of matching decodes, plus the modal-decode accuracy.

    Per formula: encode, draw ``z_samples`` posterior samples and decode each
    ``decodes_per_z`` times; the per-formula contribution is the fraction of
    those decodes structurally equal to the input formula.
    """
    if model.config.mode == CVAE and pca is None:
        raise ConfigError("cvae accuracy needs the kernel-PCA model for contexts")
    anchor_sigs = pca.anchor_signatures() if model.config.mode == CVAE else None
    total = 0.0
    modal_hits = 0
    per_formula = z_samples * decodes_per_z
    for i, f in enumerate(test):
        rng = _stream(seed, i)
        y = embed(f, pca, anchor_sigs) if model.config.mode == CVAE else None
        mu, logvar = model.posterior_np(f, y)
        std = np.exp(0.5 * logvar)
        target = print_canonical(f)
        matches = 0
        decoded: list[Formula] = []
        for _ in range(z_samples):
            z = mu + std * rng.standard_normal(mu.shape)
            for _ in range(decodes_per_z):
                trace = model.decode_trace(z, y=y, mode=SAMPLE, rng=rng)
                if trace.formula is not None:
                    decoded.append(trace.formula)
                    if print_canonical(trace.formula) == target:
                        matches += 1
        total += matches / per_formula
        modal = _modal(decoded)
        if modal is not None and print_canonical(modal) == target:
            modal_hits += 1
    return EvalReport(
        "reconstruction_accuracy",
        {
            "accuracy": total / len(test) if test else 0.0,
            "most_frequent_accuracy": modal_hits / len(test) if test else 0.0,
        },
        {
            "z_samples": z_samples,
            "decodes_per_z": decodes_per_z,
            "decodes_per_formula": per_formula,
            "test_size": len(test),
            "seed": seed,
        },
    )


def prior_generation_metrics(
    model: GvaeModel,
    train_set: list[Formula],
    prior_samples: int = 1000,
    decodes_per_z: int = 10,
    seed: int = 0,
) -> EvalReport:
    """Validity, uniqueness and novelty of standard-normal prior decodes."""
    require_mode(model, VAE, "prior generation")
    latent = model.config.encoder.latent_size
    total = prior_samples * decodes_per_z
    valid: list[str] = []
    for i in range(prior_samples):
        rng = _stream(seed, i)
        z = rng.standard_normal(latent)
        for _ in range(decodes_per_z):
            trace = model.decode_trace(z, mode=SAMPLE, rng=rng)
            if trace.formula is not None:
                valid.append(print_canonical(trace.formula))
    train_names = {print_canonical(f) for f in train_set}
    distinct = sorted(set(valid))
    novel = [name for name in distinct if name not in train_names]
    return EvalReport(
        "prior_generation",
        {
            "validity": len(valid) / total,
            "uniqueness": len(distinct) / len(valid) if valid else 0.0,
            "novelty": len(novel) / len(distinct) if distinct else 0.0,
        },
        {
            "prior_samples": prior_samples,
            "decodes_per_z": decodes_per_z,
            "total_decodes": total,
            "valid_count": len(valid),
            "distinct_count": len(distinct),
            "seed": seed,
        },
    )


def cvae_semantic_metrics(
    model: GvaeModel,
    pca: PcaModel,
    contexts: np.ndarray,
    z_per_y: int = 100,
    decodes_per_z: int = 10,
    seed: int = 0,
) -> EvalReport:
    """Mean L2 distance between each context vector and the embeddings of its
    modal decodes, and the mean pairwise kernel among those modal decodes."""
    require_mode(model, CVAE, "cvae semantic metrics")
    anchor_sigs = None
    distances: list[float] = []
    kernels: list[float] = []
    skipped = 0
    for ci, y in enumerate(np.asarray(contexts, dtype=np.float64)):
        rng = _stream(seed, ci)
        mu_p, logvar_p = model.prior_np(y)
        std_p = np.exp(0.5 * logvar_p)
        modals: list[Formula] = []
        for _ in range(z_per_y):
            z = mu_p + std_p * rng.standard_normal(mu_p.shape)
            decodes = []
            for _ in range(decodes_per_z):
                trace = model.decode_trace(z, y=y, mode=SAMPLE, rng=rng)
                if trace.formula is not None:
                    decodes.append(trace.formula)
            modal = _modal(decodes)
            if modal is None:
                skipped += 1
            else:
                modals.append(modal)
        if not modals:
            continue
        if anchor_sigs is None:
            anchor_sigs = pca.anchor_signatures()
        embeddings = [embed(f, pca, anchor_sigs) for f in modals]
        distances.append(float(np.mean([np.linalg.norm(e - y) for e in embeddings])))
        sigs = [signature(f, pca.n, pca.mode, m=pca.m or 1000, seed=pca.seed or 0)
                for f in modals]
        pair_values = [kernel(sigs[i], sigs[j])
                       for i in range(len(sigs)) for j in range(i + 1, len(sigs))]
        if pair_values:
            kernels.append(float(np.mean(pair_values)))
    return EvalReport(
        "cvae_semantic",
        {
            "mean_semantic_distance": float(np.mean(distances)) if distances else float("nan"),
            "mean_kernel_value": float(np.mean(kernels)) if kernels else float("nan"),
        },
        {
            "contexts": len(contexts),
            "z_per_y": z_per_y,
            "decodes_per_z": decodes_per_z,
            "skipped_z": skipped,
            "seed": seed,
        },
    )


def baseline_pool_stats(
    pool_size: int,
    n: int,
    pca: PcaModel,
    seed: int = 0,
    p_leaf: float = 0.4,
    max_nodes: int = 30,
    pool: list[Formula] | None = None,
) -> EvalReport:
    """Mean pairwise embedding distance and kernel over a random pool (or an
    explicitly supplied one)."""
    if pool is None:
        cfg = GeneratorConfig(n=n, p_leaf=p_leaf, max_nodes=max_nodes, seed=seed)
        rng = _stream(seed, 0xB00)
        pool = [generate_formula(cfg, rng) for _ in range(pool_size)]
    else:
        pool_size = len(pool)
    sigs = np.asarray(
        [signature(f, n, pca.mode, m=pca.m or 1000, seed=pca.seed or 0).values
         for f in pool], dtype=np.float64)
    gram = sigs @ sigs.T / sigs.shape[1]
    upper = gram[np.triu_indices(pool_size, k=1)]
    anchor_sigs = pca.anchor_signatures()
    embeddings = np.asarray([embed(f, pca, anchor_sigs) for f in pool])
    total = 0.0
    count = 0
    for i in range(pool_size - 1):
        diffs = embeddings[i + 1 :] - embeddings[i]
        total += float(np.sum(np.sqrt(np.sum(diffs * diffs, axis=1))))
        count += diffs.shape[0]
    return EvalReport(
        "baseline_pool",
        {
            "mean_pairwise_distance": total / count,
            "mean_pairwise_kernel": float(np.mean(upper)),
        },
        {"pool_size": pool_size, "n": n, "p_leaf": p_leaf,
         "max_nodes": max_nodes, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Latent interpolation
# ---------------------------------------------------------------------------


def node_edit_count(a: Formula | None, b: Formula | None) -> int:
    """Number of tree positions whose node differs between the two ASTs."""

    def paths(f: Formula, prefix=()) -> dict:
        out = {prefix: (f.op, f.index)}
        for i, c in enumerate(f.args):
            out.update(paths(c, prefix + (i,)))
        return out

    pa = paths(a) if a is not None else {}
    pb = paths(b) if b is not None else {}
    keys = set(pa) | set(pb)
    return sum(1 for k in keys if pa.get(k) != pb.get(k))


@dataclass
class SlerpResult:
    points: list[tuple[float, Formula | None]]
    z_start: np.ndarray
    z_end: np.ndarray
    seed: int

    def edit_counts(self) -> list[int]:
        out = []
        for (_, prev), (_, cur) in zip(self.points, self.points[1:]):
            out.append(node_edit_count(prev, cur))
        return out

    def mean_edit_count(self) -> float:
        edits = self.edit_counts()
        return float(np.mean(edits)) if edits else 0.0

    def csv_rows(self) -> list[str]:
        rows = ["step,t,formula,edits_from_prev"]
        edits = [0] + self.edit_counts()
        for i, ((t, f), e) in enumerate(zip(self.points, edits)):
            name = print_canonical(f) if f is not None else ""
            rows.append(f'{i},{t:.17g},"{name}",{e}')
        return rows

    def to_dot(self, n_vars: int) -> str:
        """One digraph with a cluster per interpolation step."""
        chunks = ["digraph slerp {"]
        for i, (t, f) in enumerate(self.points):
            chunks.append(f"  subgraph cluster_{i:02d} {{")
            chunks.append(f'    label="t={t:.3f}";')
            if f is None:
                chunks.append(f'    s{i}x [label="truncated", shape=box];')
            else:
                for line in dot_body(to_ast_graph(f, n_vars), prefix=f"s{i}n"):
                    chunks.append("    " + line)
            chunks.append("  }")
        chunks.append("}")
        return "\n".join(chunks)


def slerp_points(z0: np.ndarray, z1: np.ndarray, num_points: int) -> list[np.ndarray]:
    cos = float(np.dot(z0, z1) / (np.linalg.norm(z0) * np.linalg.norm(z1)))
    omega = float(np.arccos(np.clip(cos, -1.0, 1.0)))
    if omega < 1e-6:
        raise NumericError("slerp endpoints are angularly degenerate")
    out = []
    for t in np.linspace(0.0, 1.0, num_points):
        if t == 0.0:  # keep the endpoint identities exact
            out.append(z0.copy())
        elif t == 1.0:
            out.append(z1.copy())
        else:
            out.append((np.sin((1.0 - t) * omega) * z0
                        + np.sin(t * omega) * z1) / np.sin(omega))
    return out


def slerp_interpolate(
    model: GvaeModel,
    anchor: Formula,
    num_points: int = 35,
    decodes_per_point: int = 10,
    seed: int = 0,
) -> SlerpResult:
    """Great-circle walk from the anchor's posterior mean to a random point
    of equal norm; each point reports its modal decode."""
    require_mode(model, VAE, "slerp interpolation")
    mu, _ = model.posterior_np(anchor)
    radius = float(np.linalg.norm(mu))
    if radius == 0.0:
        raise NumericError("anchor encodes to the origin; no sphere to follow")
    rng = _stream(seed, 0x51E)
    while True:
        direction = rng.standard_normal(mu.shape)
        z1 = direction / np.linalg.norm(direction) * radius
        try:
            zs = slerp_points(mu, z1, num_points)
            break
        except NumericError:
            continue
    ts = np.linspace(0.0, 1.0, num_points)
    points: list[tuple[float, Formula | None]] = []
    for i, (t, z) in enumerate(zip(ts, zs)):
        point_rng = _stream(seed, 0x51E, i)
        decodes = []
        for _ in range(decodes_per_point):
            trace = model.decode_trace(z, mode=SAMPLE, rng=point_rng)
            if trace.formula is not None:
                decodes.append(trace.formula)
        points.append((float(t), _modal(decodes)))
    return SlerpResult(points, mu, z1, seed)
