"""Reverse-mode automatic differentiation on float64 numpy arrays.

Vars form the tape: each holds its value, a gradient slot and backward rules
pointing at its parents, so one forward pass records an acyclic graph that
``backward`` walks exactly once in reverse topological order.  Gradients
accumulate into the slots until ``zero_grads``; calling ``backward`` twice
without zeroing therefore doubles them.  Every op checks its output for
non-finite values and aborts with the op name.

Arrays are rank 2 at most; batching is over independent graphs, not a tensor
axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, op="var"):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ValueError(f"rank {value.ndim} array; only vectors and matrices")
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = parents
        self._backward = backward
        _ensure_finite(value, op)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)


def _ensure_finite(value: np.ndarray, op: str) -> None:
    # One summation pass; any NaN/Inf poisons the sum.
    if not math.isfinite(value.sum()):
        raise NumericError(f"non-finite value produced by op '{op}'")


def const(x) -> Var:
    return Var(x)


def _accumulate(v: Var, g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64)
    else:
        v.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _toposort(root: Var) -> list[Var]:
    """Iterative post-order: every node appears after all of its inputs."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Backpropagate from a scalar, visiting each node exactly once in
    reverse topological order; gradients add into existing slots."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.value.shape}")
    order = _toposort(root)
    # Transient per-call gradients keep repeated backward calls independent;
    # slots then accumulate so two un-zeroed calls double the gradients.
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            # Leaf (parameter or constant): persist onto the grad slot.
            _accumulate(node, np.asarray(g, dtype=np.float64))
            continue
        for parent, contribution in node._backward(g):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    out_val = a.value + b.value

    def back(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(g, b.value.shape)))

    return Var(out_val, (a, b), back, op="add")


def sub(a: Var, b: Var) -> Var:
    out_val = a.value - b.value

    def back(g):
        return ((a, _unbroadcast(g, a.value.shape)), (b, _unbroadcast(-g, b.value.shape)))

    return Var(out_val, (a, b), back, op="sub")


def mul(a: Var, b: Var) -> Var:
    out_val = a.value * b.value

    def back(g):
        return (
            (a, _unbroadcast(g * b.value, a.value.shape)),
            (b, _unbroadcast(g * a.value, b.value.shape)),
        )

    return Var(out_val, (a, b), back, op="mul")


def scale(a: Var, k: float) -> Var:
    def back(g):
        return ((a, g * k),)

    return Var(a.value * k, (a,), back, op="scale")


def add_const(a: Var, c) -> Var:
    def back(g):
        return ((a, _unbroadcast(g, a.value.shape)),)

    return Var(a.value + c, (a,), back, op="add_const")


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out_val = av @ bv

    def back(g):
        if av.ndim == 2 and bv.ndim == 2:
            return ((a, g @ bv.T), (b, av.T @ g))
        if av.ndim == 2 and bv.ndim == 1:
            return ((a, np.outer(g, bv)), (b, av.T @ g))
        if av.ndim == 1 and bv.ndim == 2:
            return ((a, bv @ g), (b, np.outer(av, g)))
        return ((a, g * bv), (b, g * av))

    return Var(out_val, (a, b), back, op="matmul")


def concat(parts: list[Var]) -> Var:
    for p in parts:
        if p.value.ndim != 1:
            raise ValueError("concat is defined for vectors")
    out_val = np.concatenate([p.value for p in parts])
    sizes = [p.value.size for p in parts]

    def back(g):
        grads = []
        offset = 0
        for p, size in zip(parts, sizes):
            grads.append((p, g[offset : offset + size]))
            offset += size
        return tuple(grads)

    return Var(out_val, tuple(parts), back, op="concat")


def vslice(a: Var, lo: int, hi: int) -> Var:
    if a.value.ndim != 1:
        raise ValueError("slice is defined for vectors")

    def back(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        return ((a, full),)

    return Var(a.value[lo:hi], (a,), back, op="slice")


def stack_rows(rows: list[Var]) -> Var:
    for r in rows:
        if r.value.ndim != 1:
            raise ValueError("stack_rows stacks vectors")
    out_val = np.stack([r.value for r in rows])

    def back(g):
        return tuple((r, g[i]) for i, r in enumerate(rows))

    return Var(out_val, tuple(rows), back, op="stack_rows")


def sum_(a: Var) -> Var:
    def back(g):
        return ((a, np.full_like(a.value, float(g))),)

    return Var(np.sum(a.value), (a,), back, op="sum")


def mean_(a: Var) -> Var:
    size = a.value.size

    def back(g):
        return ((a, np.full_like(a.value, float(g) / size)),)

    return Var(np.mean(a.value), (a,), back, op="mean")


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)

    def back(g):
        return ((a, g * (1.0 - y * y)),)

    return Var(y, (a,), back, op="tanh")


def sigmoid(a: Var) -> Var:
    with np.errstate(over="ignore"):  # saturates to exactly 0, which is fine
        y = 1.0 / (1.0 + np.exp(-a.value))

    def back(g):
        return ((a, g * y * (1.0 - y)),)

    return Var(y, (a,), back, op="sigmoid")


def relu(a: Var) -> Var:
    mask = a.value > 0

    def back(g):
        return ((a, g * mask),)

    return Var(a.value * mask, (a,), back, op="relu")


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    mask = a.value > 0
    factor = np.where(mask, 1.0, slope)

    def back(g):
        return ((a, g * factor),)

    return Var(a.value * factor, (a,), back, op="leaky_relu")


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):  # inf trips the finite guard below
        y = np.exp(a.value)

    def back(g):
        return ((a, g * y),)

    return Var(y, (a,), back, op="exp")


def softmax(a: Var) -> Var:
    if a.value.ndim != 1:
        raise ValueError("softmax is defined for vectors")
    shifted = a.value - np.max(a.value)
    e = np.exp(shifted)
    y = e / np.sum(e)

    def back(g):
        return ((a, y * (g - float(np.dot(g, y)))),)

    return Var(y, (a,), back, op="softmax")


def log_softmax(a: Var) -> Var:
    if a.value.ndim != 1:
        raise ValueError("log_softmax is defined for vectors")
    shifted = a.value - np.max(a.value)
    log_z = np.log(np.sum(np.exp(shifted)))
    y = shifted - log_z
    p = np.exp(y)

    def back(g):
        return ((a, g - p * np.sum(g)),)

    return Var(y, (a,), back, op="log_softmax")


def l2_norm(a: Var) -> Var:
    norm = float(np.sqrt(np.sum(a.value * a.value)))

    def back(g):
        if norm == 0.0:
            return ((a, np.zeros_like(a.value)),)
        return ((a, float(g) * a.value / norm),)

    return Var(norm, (a,), back, op="l2_norm")


def linear(w: Var, x: Var, b: Var | None = None) -> Var:
    out = matmul(w, x)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# Composite network pieces
# ---------------------------------------------------------------------------


def gru_cell(x: Var, h: Var, w: Var, u: Var, b_x: Var, b_h: Var) -> Var:
    """Gated recurrent unit with fused gate projections.

    ``w`` is (3H, D) over the input, ``u`` is (3H, H) over the hidden state;
    rows are ordered reset, update, candidate.  The reset gate multiplies the
    projected hidden contribution of the candidate.
    """
    hidden = h.value.shape[0]
    gx = add(matmul(w, x), b_x)
    gh = add(matmul(u, h), b_h)
    r = sigmoid(add(vslice(gx, 0, hidden), vslice(gh, 0, hidden)))
    z = sigmoid(add(vslice(gx, hidden, 2 * hidden), vslice(gh, hidden, 2 * hidden)))
    c = tanh(add(vslice(gx, 2 * hidden, 3 * hidden),
                 mul(r, vslice(gh, 2 * hidden, 3 * hidden))))
    one_minus_z = add_const(scale(z, -1.0), 1.0)
    return add(mul(z, h), mul(one_minus_z, c))


def gated_sum(inputs: list[Var], w_gate: Var, b_gate: Var,
              w_map: Var, b_map: Var) -> Var:
    """Sum of sigmoid-gated linear maps; zero vector for an empty input set."""
    if not inputs:
        return const(np.zeros(w_gate.value.shape[0]))
    acc = None
    for h in inputs:
        term = mul(sigmoid(linear(w_gate, h, b_gate)), linear(w_map, h, b_map))
        acc = term if acc is None else add(acc, term)
    return acc


def cross_entropy_from_logits(logits: Var, target: int,
                              mask: np.ndarray | None = None) -> Var:
    """Negative log softmax probability of ``target``; masked-out classes are
    treated as negative-infinity logits."""
    z = logits.value
    if z.ndim != 1:
        raise ValueError("logits must be a vector")
    if not 0 <= target < z.size:
        raise ValueError(f"target {target} outside [0, {z.size})")
    if mask is None:
        allowed = np.ones(z.size, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != z.shape:
            raise ValueError("mask shape must match logits")
        if not allowed.any():
            raise ValueError("mask disallows every class")
    if not allowed[target]:
        raise ValueError(f"target class {target} is masked out")
    shifted = np.where(allowed, z - np.max(z[allowed]), -np.inf)
    with np.errstate(over="ignore"):
        e = np.where(allowed, np.exp(shifted), 0.0)
    total = float(np.sum(e))
    p = e / total
    loss = -(shifted[target] - np.log(total))

    def back(g):
        grad = p * float(g)
        grad[target] -= float(g)
        return ((logits, grad),)

    return Var(loss, (logits,), back, op="cross_entropy")


def masked_probabilities(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Renormalized softmax over the allowed classes (plain numpy helper)."""
    if mask is None:
        allowed = np.ones(logits.size, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool)
    shifted = np.where(allowed, logits - np.max(logits[allowed]), -np.inf)
    with np.errstate(over="ignore"):
        e = np.where(allowed, np.exp(shifted), 0.0)
    return e / np.sum(e)


def gaussian_kl(mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Var:
    """KL between diagonal Gaussians, summed over dimensions."""
    if mu_q.value.shape != mu_p.value.shape:
        raise ValueError("Gaussian dimensions differ")
    diff = sub(mu_q, mu_p)
    ratio = exp(sub(logvar_q, logvar_p))
    quad = mul(mul(diff, diff), exp(scale(logvar_p, -1.0)))
    inner = add(add(sub(logvar_p, logvar_q), ratio), quad)
    return scale(add_const(sum_(inner), -float(mu_q.value.size)), 0.5)


def reparameterize(mu: Var, logvar: Var, rng: np.random.Generator) -> Var:
    eps = rng.standard_normal(mu.value.shape)
    return add(mu, mul(exp(scale(logvar, 0.5)), const(eps)))


# ---------------------------------------------------------------------------
# Parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------


class ModelParams:
    """Ordered, uniquely named collection of trainable leaf Vars."""

    def __init__(self):
        self._params: dict[str, Var] = {}

    def add(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(np.array(value, dtype=np.float64))
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for v in self._params.values():
            v.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, v in self._params.items():
            out.add(name, v.value.copy())
        return out

    def load_values(self, other: "ModelParams") -> None:
        if other.names() != self.names():
            raise ValueError("parameter collections do not match")
        for name, v in self._params.items():
            if v.value.shape != other[name].value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            v.value = other[name].value.copy()


class Adam:
    """Adam with bias-corrected moments; ``step`` consumes current grad slots."""

    def __init__(self, params: ModelParams, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(v.value) for name, v in params.items()}
        self._v = {name: np.zeros_like(v.value) for name, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            _ensure_finite(p.value, "adam_step")


def adam_step(params: ModelParams, state: Adam) -> None:
    state.step()


CHECKPOINT_VERSION = 1


def save_params(directory: str, params: ModelParams, config: dict) -> None:
    """manifest.json (names, shapes, config) + params.bin (row-major f64le)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "f64le",
        "config": config,
        "params": [
            {"name": name, "shape": list(v.value.shape)} for name, v in params.items()
        ],
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for _, v in params.items():
            fh.write(np.ascontiguousarray(v.value, dtype="<f8").tobytes())


def load_params(directory: str) -> tuple[ModelParams, dict]:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json under {directory}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = np.fromfile(os.path.join(directory, "params.bin"), dtype="<f8")
    params = ModelParams()
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + count > raw.size:
            raise DataError(f"{directory}: params.bin shorter than the manifest demands")
        params.add(entry["name"], raw[offset : offset + count].reshape(shape))
        offset += count
    if offset != raw.size:
        raise DataError(f"{directory}: params.bin length does not match the manifest")
    return params, manifest.get("config", {})


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    coords_checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def grad_check(
    fn,
    params: ModelParams,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central
    finite differences, coordinate by coordinate."""
    params.zero_grads()
    loss = fn()
    backward(loss)
    analytic = {name: (v.grad.copy() if v.grad is not None else np.zeros_like(v.value))
                for name, v in params.items()}

    coords: list[tuple[str, tuple]] = []
    for name, v in params.items():
        for idx in np.ndindex(v.value.shape if v.value.shape else (1,)):
            coords.append((name, idx if v.value.shape else ()))
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    max_rel = 0.0
    worst = ""
    for name, idx in coords:
        v = params[name]
        original = v.value[idx] if idx != () else float(v.value)
        _poke(v, idx, original + h)
        f_plus = float(fn().value)
        _poke(v, idx, original - h)
        f_minus = float(fn().value)
        _poke(v, idx, original)
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name][idx] if idx != () else float(analytic[name])
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
        if rel > max_rel:
            max_rel = rel
            worst = f"{name}{list(idx)}"
    return GradCheckReport(max_rel, worst, len(coords))


def _poke(v: Var, idx, value: float) -> None:
    if idx == ():
        v.value = np.asarray(value)
    else:
        v.value[idx] = value
