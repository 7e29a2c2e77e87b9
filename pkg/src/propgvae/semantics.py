"""Boolean semantic kernel, Gram matrices and kernel-PCA context vectors.

The kernel between two formulae is the mean over variable assignments of the
product of their +1/-1 valuations: 1 for semantically equivalent formulae,
-1 for complementary ones.  Exact mode averages over all 2**n assignments in
the contract enumeration order; Monte Carlo mode averages over m uniform
assignments drawn from a recorded seed, so signatures with equal seeds share
their sample and stay comparable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DataError, NumericError
from .formulas import (
    Formula,
    assignment_matrix,
    parse,
    print_canonical,
    satisfaction,
)

#: Eigenvalues below this (relative to the largest) are treated as zero when
#: building projection scalings.
_ZERO_EIG_RTOL = 1e-12

EXACT = "exact"
MONTE_CARLO = "mc"


@dataclass(frozen=True)
class SemanticSignature:
    """A formula's +1/-1 valuation vector over an assignment sample."""

    values: np.ndarray
    n: int
    mode: str
    m: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in (EXACT, MONTE_CARLO):
            raise ValueError(f"unknown signature mode {self.mode!r}")
        if self.mode == EXACT and len(self.values) != 2**self.n:
            raise ValueError("exact signature must cover all 2**n assignments")

    def compatible_with(self, other: "SemanticSignature") -> None:
        if self.mode != other.mode or self.n != other.n:
            raise ValueError("signatures differ in mode or variable count")
        if len(self.values) != len(other.values):
            raise ValueError("signatures differ in length")
        if self.mode == MONTE_CARLO and self.seed != other.seed:
            raise ValueError("Monte Carlo signatures built from different samples")


def mc_assignments(n: int, m: int, seed: int) -> np.ndarray:
    """The m uniform assignments shared by all signatures with this seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, n, m)))
    return rng.integers(0, 2, size=(m, n), dtype=np.uint8)


def signature(
    f: Formula,
    n: int,
    mode: str = EXACT,
    m: int = 1000,
    seed: int = 0,
) -> SemanticSignature:
    if mode == EXACT:
        bits = assignment_matrix(n)
        vals = np.where(satisfaction(f, bits), 1, -1).astype(np.int8)
        return SemanticSignature(vals, n, EXACT)
    if mode == MONTE_CARLO:
        if m < 1:
            raise ValueError("Monte Carlo mode needs at least one sample")
        bits = mc_assignments(n, m, seed)
        vals = np.where(satisfaction(f, bits), 1, -1).astype(np.int8)
        return SemanticSignature(vals, n, MONTE_CARLO, m=m, seed=seed)
    raise ValueError(f"unknown signature mode {mode!r}")


def kernel(a: SemanticSignature, b: SemanticSignature) -> float:
    """Mean elementwise product of valuations, in [-1, 1]."""
    a.compatible_with(b)
    return float(np.mean(a.values.astype(np.float64) * b.values))


def agreement(a: SemanticSignature, b: SemanticSignature) -> float:
    """Fraction of assignments where the valuations coincide."""
    a.compatible_with(b)
    return float(np.mean(a.values == b.values))


def jaccard(a: SemanticSignature, b: SemanticSignature) -> float:
    """Jaccard index of the satisfying sets; 1.0 when both are unsatisfiable."""
    a.compatible_with(b)
    sat_a = a.values == 1
    sat_b = b.values == 1
    union = int(np.sum(sat_a | sat_b))
    if union == 0:
        return 1.0
    return float(np.sum(sat_a & sat_b) / union)


def _signature_matrix(
    formulas: list[Formula], n: int, mode: str, m: int, seed: int
) -> np.ndarray:
    rows = [signature(f, n, mode, m=m, seed=seed).values for f in formulas]
    return np.asarray(rows, dtype=np.float64)


@dataclass(frozen=True)
class GramMatrix:
    """Pairwise kernel values over an ordered anchor list."""

    matrix: np.ndarray
    anchors: tuple[str, ...]
    n: int
    mode: str
    m: int | None = None
    seed: int | None = None

    @property
    def size(self) -> int:
        return len(self.anchors)


def gram_matrix(
    anchors: list[Formula],
    n: int,
    mode: str = EXACT,
    m: int = 1000,
    seed: int = 0,
    threads: int = 1,
) -> GramMatrix:
    """Symmetric matrix of pairwise kernels; unit diagonal by construction."""
    if not anchors:
        raise ValueError("anchor list must be non-empty")
    if threads > 1:
        sig = _signature_matrix_threaded(anchors, n, mode, m, seed, threads)
    else:
        sig = _signature_matrix(anchors, n, mode, m, seed)
    g = (sig @ sig.T) / sig.shape[1]
    names = tuple(print_canonical(f) for f in anchors)
    return GramMatrix(g, names, n, mode, m=m if mode == MONTE_CARLO else None,
                      seed=seed if mode == MONTE_CARLO else None)


def _signature_matrix_threaded(
    formulas: list[Formula], n: int, mode: str, m: int, seed: int, threads: int
) -> np.ndarray:
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(len(formulas)), threads)
    out: list[np.ndarray | None] = [None] * threads

    def work(slot: int, idx: np.ndarray) -> None:
        out[slot] = _signature_matrix([formulas[i] for i in idx], n, mode, m, seed)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, s, idx) for s, idx in enumerate(chunks) if len(idx)]
        for fut in futures:
            fut.result()
    return np.concatenate([o for o in out if o is not None], axis=0)


# ---------------------------------------------------------------------------
# Jacobi eigendecomposition
# ---------------------------------------------------------------------------


class JacobiError(NumericError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"Jacobi sweep limit ({sweeps}) reached; off-diagonal residual {residual:.3e}"
        )
        self.residual = residual


def jacobi_eigh(
    a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with columns as eigenvectors, in no
    particular order.  Converged when the off-diagonal Frobenius norm drops
    below ``tol``.
    """
    a = np.array(a, dtype=np.float64)
    size = a.shape[0]
    if a.shape != (size, size):
        raise ValueError("matrix must be square")
    if size == 1:
        return a[0].copy(), np.ones((1, 1))
    vecs = np.eye(size)
    # Entries this small cannot lift the off-diagonal norm above tol.
    skip = tol / (10.0 * size)
    for _ in range(max_sweeps):
        off = _offdiag_norm(a)
        if off <= tol:
            return np.diag(a).copy(), vecs
        for p in range(size - 1):
            for q in range(p + 1, size):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                _rotate(a, vecs, p, q, c, s, t, apq)
    residual = _offdiag_norm(a)
    if residual <= tol:
        return np.diag(a).copy(), vecs
    raise JacobiError(residual, max_sweeps)


def _offdiag_norm(a: np.ndarray) -> float:
    # Summing squares of the off-diagonal entries directly avoids the
    # catastrophic cancellation of total - diagonal near convergence.
    sq = a * a
    np.fill_diagonal(sq, 0.0)
    return float(np.sqrt(np.sum(sq)))


def _rotate(a, vecs, p, q, c, s, t, apq) -> None:
    app, aqq = a[p, p], a[q, q]
    col_p = a[:, p].copy()
    col_q = a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    a[p, :] = a[:, p]
    a[q, :] = a[:, q]
    # Closed forms for the 2x2 block keep symmetry exact.
    a[p, p] = app - t * apq
    a[q, q] = aqq + t * apq
    a[p, q] = 0.0
    a[q, p] = 0.0
    col_p = vecs[:, p].copy()
    col_q = vecs[:, q].copy()
    vecs[:, p] = c * col_p - s * col_q
    vecs[:, q] = s * col_p + c * col_q


# ---------------------------------------------------------------------------
# Kernel PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    """Centered eigendecomposition of a Gram matrix, ready for projection.

    ``projection`` holds the top-k eigenvectors scaled by 1/sqrt(eigenvalue)
    (columns for zero eigenvalues are zero), so a centered kernel row maps to
    its context vector by a single matrix product.
    """

    anchors: tuple[str, ...]
    n: int
    mode: str
    m: int | None
    seed: int | None
    k: int
    eigenvalues: np.ndarray  # all N, descending, clamped at 0
    projection: np.ndarray  # (N, k)
    col_means: np.ndarray  # (N,) column means of the uncentered Gram
    grand_mean: float

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = float(np.sum(self.eigenvalues))
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total

    def anchor_signatures(self) -> np.ndarray:
        formulas = [parse(text, self.n) for text in self.anchors]
        return _signature_matrix(
            formulas, self.n, self.mode, self.m or 0, self.seed or 0
        )


def center_gram(g: np.ndarray) -> np.ndarray:
    """Double centering: K - 1K/N - K1/N + 1K1/N^2."""
    col = g.mean(axis=0, keepdims=True)
    row = g.mean(axis=1, keepdims=True)
    return g - col - row + g.mean()


def kernel_pca_fit(gram: GramMatrix, k: int) -> PcaModel:
    if k < 1 or k > gram.size:
        raise ValueError(f"component count {k} outside [1, {gram.size}]")
    centered = center_gram(gram.matrix)
    eigvals, eigvecs = jacobi_eigh(centered)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    scale = np.zeros(k)
    cutoff = _ZERO_EIG_RTOL * max(float(eigvals[0]), 1.0)
    positive = eigvals[:k] > cutoff
    scale[positive] = 1.0 / np.sqrt(eigvals[:k][positive])
    # C layout keeps in-memory and reloaded models bitwise interchangeable.
    projection = np.ascontiguousarray(eigvecs[:, :k] * scale)
    return PcaModel(
        anchors=gram.anchors,
        n=gram.n,
        mode=gram.mode,
        m=gram.m,
        seed=gram.seed,
        k=k,
        eigenvalues=eigvals,
        projection=projection,
        col_means=gram.matrix.mean(axis=0),
        grand_mean=float(gram.matrix.mean()),
    )


def center_kernel_row(model: PcaModel, row: np.ndarray) -> np.ndarray:
    """Center a new kernel row consistently with the fitted Gram."""
    return row - model.col_means - row.mean() + model.grand_mean


def embed_signature(sig: SemanticSignature, model: PcaModel,
                    anchor_sigs: np.ndarray | None = None) -> np.ndarray:
    """Context vector of a raw signature (requirement-mining entry point)."""
    if sig.n != model.n or sig.mode != model.mode:
        raise ValueError("signature incompatible with the fitted model")
    if model.mode == MONTE_CARLO and sig.seed != model.seed:
        raise ValueError("Monte Carlo signature sampled with a different seed")
    if anchor_sigs is None:
        anchor_sigs = model.anchor_signatures()
    row = anchor_sigs @ sig.values.astype(np.float64) / anchor_sigs.shape[1]
    return center_kernel_row(model, row) @ model.projection


def embed(f: Formula, model: PcaModel,
          anchor_sigs: np.ndarray | None = None) -> np.ndarray:
    sig = signature(f, model.n, model.mode, m=model.m or 1000, seed=model.seed or 0)
    return embed_signature(sig, model, anchor_sigs)


def embed_many(formulas: list[Formula], model: PcaModel) -> np.ndarray:
    """Context vectors stacked as rows; shares one anchor signature matrix."""
    anchor_sigs = model.anchor_signatures()
    return np.asarray([embed(f, model, anchor_sigs) for f in formulas])


# ---------------------------------------------------------------------------
# Persistence: manifest.json + raw little-endian float64 arrays
# ---------------------------------------------------------------------------


def _write_arrays(directory: str, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = dict(manifest)
    manifest["dtype"] = "f64le"
    manifest["arrays"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()
    ]
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(directory, "data.bin"), "wb") as fh:
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_arrays(directory: str) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json under {directory}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(directory, "data.bin"), dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + count > raw.size:
            raise DataError(f"{directory}: data.bin shorter than the manifest demands")
        arrays[entry["name"]] = raw[offset : offset + count].reshape(shape).astype(np.float64)
        offset += count
    if offset != raw.size:
        raise DataError(f"{directory}: data.bin length does not match the manifest")
    return manifest, arrays


def save_gram(gram: GramMatrix, directory: str) -> None:
    manifest = {
        "kind": "gram",
        "anchors": list(gram.anchors),
        "n": gram.n,
        "mode": gram.mode,
        "m": gram.m,
        "seed": gram.seed,
    }
    _write_arrays(directory, manifest, {"gram": gram.matrix})


def load_gram(directory: str) -> GramMatrix:
    manifest, arrays = _read_arrays(directory)
    if manifest.get("kind") != "gram":
        raise DataError(f"{directory} does not hold a Gram matrix")
    return GramMatrix(
        arrays["gram"],
        tuple(manifest["anchors"]),
        manifest["n"],
        manifest["mode"],
        m=manifest.get("m"),
        seed=manifest.get("seed"),
    )


def save_pca(model: PcaModel, directory: str) -> None:
    manifest = {
        "kind": "pca",
        "anchors": list(model.anchors),
        "n": model.n,
        "mode": model.mode,
        "m": model.m,
        "seed": model.seed,
        "k": model.k,
        "eigenvalues": [float(v) for v in model.eigenvalues],
    }
    arrays = {
        "projection": model.projection,
        "col_means": model.col_means,
        "grand_mean": np.asarray([model.grand_mean]),
    }
    _write_arrays(directory, manifest, arrays)


def load_pca(directory: str) -> PcaModel:
    manifest, arrays = _read_arrays(directory)
    if manifest.get("kind") != "pca":
        raise DataError(f"{directory} does not hold a kernel-PCA model")
    return PcaModel(
        anchors=tuple(manifest["anchors"]),
        n=manifest["n"],
        mode=manifest["mode"],
        m=manifest.get("m"),
        seed=manifest.get("seed"),
        k=manifest["k"],
        eigenvalues=np.asarray(manifest["eigenvalues"], dtype=np.float64),
        projection=arrays["projection"],
        col_means=arrays["col_means"],
        grand_mean=float(arrays["grand_mean"][0]),
    )


def export_kernel_distance_csv(
    path: str, formulas: list[Formula], model: PcaModel
) -> None:
    """Pairwise (kernel, embedding distance) rows for correlation plots."""
    anchor_sigs = model.anchor_signatures()
    sigs = [signature(f, model.n, model.mode, m=model.m or 1000, seed=model.seed or 0)
            for f in formulas]
    ys = [embed_signature(s, model, anchor_sigs) for s in sigs]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("i,j,kernel,distance\n")
        for i in range(len(formulas)):
            for j in range(i + 1, len(formulas)):
                k = kernel(sigs[i], sigs[j])
                d = float(np.linalg.norm(ys[i] - ys[j]))
                fh.write(f"{i},{j},{k:.17g},{d:.17g}\n")


# ---------------------------------------------------------------------------
# Estimator front end
# ---------------------------------------------------------------------------


class SemanticPCA(BaseEstimator, TransformerMixin):
    """Kernel-PCA transformer from formulae to semantic context vectors.

    Parameters follow the scikit-learn convention; ``fit`` computes the exact
    or Monte Carlo Gram matrix over the anchor formulae and keeps the top
    ``n_components`` centered eigenvectors for projection.
    """

    def __init__(self, n_components: int = 100, n_vars: int = 5,
                 mode: str = EXACT, mc_samples: int = 1000, seed: int = 0):
        self.n_components = n_components
        self.n_vars = n_vars
        self.mode = mode
        self.mc_samples = mc_samples
        self.seed = seed

    def fit(self, X, y=None):
        anchors = self._as_formulas(X)
        gram = gram_matrix(anchors, self.n_vars, self.mode,
                           m=self.mc_samples, seed=self.seed)
        self.model_ = kernel_pca_fit(gram, min(self.n_components, gram.size))
        self.eigenvalues_ = self.model_.eigenvalues
        self.explained_variance_ratio_ = self.model_.explained_variance_ratio
        return self

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return embed_many(self._as_formulas(X), self.model_)

    def transform_signature(self, sig: SemanticSignature) -> np.ndarray:
        self._check_fitted()
        return embed_signature(sig, self.model_)

    def _as_formulas(self, X) -> list[Formula]:
        out = []
        for item in X:
            if isinstance(item, Formula):
                out.append(item)
            elif isinstance(item, str):
                out.append(parse(item, self.n_vars))
            else:
                raise TypeError(f"expected Formula or str, got {type(item).__name__}")
        return out

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("SemanticPCA must be fitted before transforming")
