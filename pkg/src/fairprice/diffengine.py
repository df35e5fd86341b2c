"""Small reverse-mode autodiff over dense 2-D float64 arrays and CSR operators.

Every forward op lives on a :class:`Tape`; :func:`backward` replays the tape
in reverse and accumulates parameter gradients into a :class:`ParamStore`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

CHECKPOINT_FORMAT = "fairprice-params"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class Tensor:
    """A 2-D float64 value with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as2d(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _edge_rows(pattern: sp.csr_matrix) -> np.ndarray:
    return np.repeat(np.arange(pattern.shape[0]), np.diff(pattern.indptr))


def _scatter_add(index: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """out[index[e]] += g[e] for every row e."""
    if g.shape[1] == 1:
        return np.bincount(index, weights=g[:, 0], minlength=n)[:, None]
    scatter = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size))
    return scatter @ g


class Tape:
    """Ordered record of executed ops.

    ``training`` switches dropout on; ``rng`` supplies its masks.
    """

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.training = training
        self.rng = rng
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._bindings: list[tuple[Tensor, "ParamStore", str]] = []

    def __len__(self):
        return len(self._entries)

    # leaves
    def constant(self, value) -> Tensor:
        return Tensor(_as2d(value))

    def param(self, store: "ParamStore", name: str) -> Tensor:
        t = Tensor(store.params[name], requires_grad=True)
        self._bindings.append((t, store, name))
        return t

    def _record(self, value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self._entries.append((out, inputs, grad_fn))
        return out

    # linear algebra
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        av, bv = a.value, b.value
        # skip the gradient of a constant side: the adversary's H is 400 x 128
        return self._record(av @ bv, (a, b), lambda g: (g @ bv.T if a.requires_grad else None,
                                                        av.T @ g if b.requires_grad else None))

    def sparse_matmul(self, adj: sp.csr_matrix, x: Tensor, values: Tensor | None = None) -> Tensor:
        """``adj @ x``; with ``values`` (nnz, 1) the CSR pattern takes those entries."""
        if adj.shape[1] != x.shape[0]:
            raise DimensionError(f"sparse_matmul: shapes {adj.shape} and {x.shape} are not aligned")
        if values is None:
            # adj.T of a CSR matrix is a CSC view; no conversion needed
            return self._record(adj @ x.value, (x,), lambda g: (adj.T @ g,))
        if values.shape != (adj.nnz, 1):
            raise DimensionError(f"sparse_matmul: edge values {values.shape} do not match nnz {adj.nnz}")
        rows = _edge_rows(adj)
        cols = adj.indices
        weighted = sp.csr_matrix((values.value[:, 0], cols, adj.indptr), shape=adj.shape)
        xv = x.value

        def grad_fn(g):
            g_vals = np.einsum("ek,ek->e", g[rows], xv[cols])[:, None] if values.requires_grad else None
            return (weighted.T @ g if x.requires_grad else None), g_vals

        return self._record(weighted @ xv, (x, values), grad_fn)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        if b.shape != (1, x.shape[1]):
            raise DimensionError(f"add_bias: bias {b.shape} does not fit input {x.shape}")
        return self._record(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
        splits = np.cumsum([p.shape[1] for p in parts])[:-1]
        return self._record(
            np.concatenate([p.value for p in parts], axis=1),
            tuple(parts),
            lambda g: tuple(np.split(g, splits, axis=1)),
        )

    def gather_rows(self, x: Tensor, index: np.ndarray) -> Tensor:
        n = x.shape[0]

        def grad_fn(g):
            return (_scatter_add(index, g, n),)

        return self._record(x.value[index], (x,), grad_fn)

    # elementwise
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape("add", a, b)
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape("sub", a, b)
        return self._record(a.value - b.value, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._record(x.value * c, (x,), lambda g: (g * c,))

    def mul_const(self, x: Tensor, c) -> Tensor:
        c = np.broadcast_to(_as2d(c), x.shape)
        return self._record(x.value * c, (x,), lambda g: (g * c,))

    def add_const(self, x: Tensor, c) -> Tensor:
        return self._record(x.value + c, (x,), lambda g: (g,))

    def sigmoid(self, x: Tensor) -> Tensor:
        y = _sigmoid(x.value)
        return self._record(y, (x,), lambda g: (g * y * (1.0 - y),))

    def tanh_act(self, x: Tensor) -> Tensor:
        y = np.tanh(x.value)
        return self._record(y, (x,), lambda g: (g * (1.0 - y * y),))

    def relu(self, x: Tensor) -> Tensor:
        on = x.value > 0
        return self._record(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))

    def leaky_relu(self, x: Tensor, slope: float = 0.01) -> Tensor:
        k = np.where(x.value > 0, 1.0, slope)
        return self._record(x.value * k, (x,), lambda g: (g * k,))

    def exp(self, x: Tensor) -> Tensor:
        y = np.exp(x.value)
        return self._record(y, (x,), lambda g: (g * y,))

    def log(self, x: Tensor) -> Tensor:
        xv = x.value
        return self._record(np.log(xv), (x,), lambda g: (g / xv,))

    def abs_act(self, x: Tensor) -> Tensor:
        # sign(0) = 0: subgradient zero at the kink
        sgn = np.sign(x.value)
        return self._record(np.abs(x.value), (x,), lambda g: (g * sgn,))

    def clip(self, x: Tensor, lo: float, hi: float) -> Tensor:
        inside = (x.value >= lo) & (x.value <= hi)
        return self._record(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        """Inverted dropout; identity outside training mode."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not self.training or rate == 0.0:
            return x
        if self.rng is None:
            raise ValueError("training-mode dropout needs a tape rng")
        keep = (self.rng.random(x.shape) >= rate) / (1.0 - rate)
        return self._record(x.value * keep, (x,), lambda g: (g * keep,))

    def row_softmax_masked(self, pattern: sp.csr_matrix, scores: Tensor) -> Tensor:
        """Softmax over each CSR row's stored entries.

        ``scores`` is (nnz, 1) in CSR data order; the result has the same layout,
        and absent entries are implicitly zero.
        """
        if scores.shape != (pattern.nnz, 1):
            raise DimensionError(f"row_softmax_masked: scores {scores.shape} do not match nnz {pattern.nnz}")
        n = pattern.shape[0]
        rows = _edge_rows(pattern)
        v = scores.value[:, 0]
        starts = pattern.indptr[:-1]
        filled = np.diff(pattern.indptr) > 0
        row_max = np.full(n, -np.inf)
        if v.size:
            row_max[filled] = np.maximum.reduceat(v, starts[filled])
        e = np.exp(v - row_max[rows])
        denom = np.bincount(rows, weights=e, minlength=n)
        y = (e / denom[rows])[:, None]

        def grad_fn(g):
            dot = np.bincount(rows, weights=(g * y)[:, 0], minlength=n)
            return (y * (g - dot[rows][:, None]),)

        return self._record(y, (scores,), grad_fn)

    # reductions
    def sum_all(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))

    def mean_all(self, x: Tensor) -> Tensor:
        return self.scale(self.sum_all(x), 1.0 / x.value.size)

    def weighted_sum(self, x: Tensor, w) -> Tensor:
        """Column reduction ``w^T x`` for a constant (n, 1) weight vector."""
        w = _as2d(w)
        if w.shape != (x.shape[0], 1) or x.shape[1] != 1:
            raise DimensionError(f"weighted_sum: weights {w.shape} do not fit {x.shape}")
        return self._record(w.T @ x.value, (x,), lambda g: (w * g[0, 0],))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into each bound ParamStore gradient buffer."""
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 loss, got {loss.shape}")
    for out, inputs, _ in tape._entries:
        out.grad = None
        for t in inputs:
            t.grad = None
    for t, _, _ in tape._bindings:
        t.grad = None
    loss.grad = np.ones((1, 1))
    for out, inputs, grad_fn in reversed(tape._entries):
        if out.grad is None:
            continue
        grads = grad_fn(out.grad)
        for t, g in zip(inputs, grads):
            if not t.requires_grad or g is None:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad += g
    for t, store, name in tape._bindings:
        if t.grad is not None:
            store.grads[name] += t.grad


@dataclass
class ParamStore:
    """Named parameters in disjoint groups, with gradients and Adam moments."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, list[str]] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value, group: str) -> None:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(_as2d(value), copy=True)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.groups.setdefault(group, []).append(name)
        self.steps.setdefault(group, 0)

    def add_glorot(self, name: str, shape: tuple[int, int], group: str, rng: np.random.Generator) -> None:
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        self.add(name, rng.uniform(-limit, limit, size=shape), group)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.params)
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}")
        return list(self.groups[group])

    def zero_grad(self, group: str | None = None) -> None:
        for name in self.names(group):
            self.grads[name][...] = 0.0

    def snapshot(self, group: str | None = None) -> dict[str, np.ndarray]:
        return {name: self.params[name].copy() for name in self.names(group)}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, val in values.items():
            if self.params[name].shape != val.shape:
                raise DimensionError(f"{name}: stored shape {val.shape} != parameter shape {self.params[name].shape}")
            self.params[name][...] = val


def adam_step(
    store: ParamStore,
    group: str,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam with L2 weight decay added to the gradient; zeroes the group's grads."""
    names = store.names(group)
    store.steps[group] += 1
    t = store.steps[group]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in names:
        theta = store.params[name]
        g = store.grads[name]
        if weight_decay:
            g = g + weight_decay * theta
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        store.grads[name][...] = 0.0


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(
    store: ParamStore,
    builder: Callable[[Tape, ParamStore], Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    training: bool = False,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients to central finite differences.

    The error for a parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``, i.e. the worst entry relative to the gradient's scale, so
    near-zero entries do not dominate. Each loss evaluation gets a fresh tape
    whose rng is re-seeded, so dropout masks repeat.
    """

    def evaluate(with_grad: bool) -> float:
        tape = Tape(training=training, rng=np.random.default_rng(seed))
        loss = builder(tape, store)
        if with_grad:
            backward(tape, loss)
        return float(loss.value[0, 0])

    names = list(names) if names is not None else store.names()
    for name in names:
        store.grads[name][...] = 0.0
    evaluate(True)
    analytic = {name: store.grads[name].copy() for name in names}
    for name in names:
        store.grads[name][...] = 0.0

    errors = {}
    for name in names:
        theta = store.params[name]
        numeric = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            up = evaluate(False)
            theta[idx] = orig - h
            down = evaluate(False)
            theta[idx] = orig
            numeric[idx] = (up - down) / (2.0 * h)
        scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max())
        diff = np.abs(analytic[name] - numeric).max()
        errors[name] = float(diff / scale) if scale > 0 else float(diff)
    return GradCheckReport(errors, tolerance)


def save_params(values: dict[str, np.ndarray], path, extra: dict | None = None) -> None:
    """Write parameters as version-tagged JSON.

    Layout: ``{"format", "version", "extra", "params": [{"name", "shape",
    "values"}]}`` with values row-major; floats use Python's shortest
    round-trip repr, so load -> save is byte-stable.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "extra": extra or {},
        "params": [
            {"name": name, "shape": list(arr.shape), "values": [float(x) for x in arr.ravel()]}
            for name, arr in values.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    values = {
        p["name"]: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]
    }
    return values, doc.get("extra", {})
