"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the tiny transformers train with lives here: a Parameter store, a
dynamically built computation graph over numpy arrays, the fused ops the
models need (linear, attention, norms, losses), and a central-difference
gradient checker used by the verification suite.

Graphs are value-like and rebuilt per forward pass; there is no shared
mutable module state apart from a thread-local grad-mode flag, so tensors and
parameters can move freely between workers.
"""
from __future__ import annotations

import math
import threading

import numpy as np

RMS_EPS = 1e-8
LOG_FLOOR = 1e-30

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction inside its body."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Parameter:
    """Named weight array with a persistent gradient buffer.

    Non-trainable parameters still participate in forward passes but never
    receive gradient contributions; their grad buffer stays zero.
    """

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name or '<unnamed>'} has non-finite values")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numel(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = "train" if self.trainable else "frozen"
        return f"Parameter({self.name or '?'}, shape={self.data.shape}, {flag})"


class Tensor:
    """Node in the reverse-mode graph; data is a float64 ndarray.

    `grad` is populated by backward(). Leaf nodes made from a Parameter keep a
    back-reference so backward() can accumulate into the parameter's buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_param")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None, param=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self._parents = tuple(parents) if self.requires_grad else ()
        self._bwd = bwd if self.requires_grad else None
        self._param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from this (scalar) node into every trainable leaf."""
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar root")
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no trainable inputs")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
            p = node._param
            if p is not None and p.trainable and node.grad is not None:
                p.grad += node.grad

    # light operator sugar; heavy ops are module functions below

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, s):
        return scale(self, s)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, rg={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order, reversed; avoids recursion limits on deep graphs
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def wrap(x) -> Tensor:
    """Lift a Parameter, ndarray, or scalar into a graph node."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return Tensor(x.data, requires_grad=x.trainable, param=x)
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, bwd) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, bwd=bwd)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    """Elementwise sum; also supports a (d,) bias broadcast over (S, d) rows."""
    a, b = wrap(a), wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def scale(a, s: float) -> Tensor:
    a = wrap(a)
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * s)

    return _node(a.data * s, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def linear(x, w) -> Tensor:
    """y = x @ w.T for row-vector activations x (S, in) and weight w (out, in)."""
    x, w = wrap(x), wrap(w)

    def bwd(g):
        if x.requires_grad:
            x._accum(g @ w.data)
        if w.requires_grad:
            w._accum(g.T @ x.data)

    return _node(x.data @ w.data.T, (x, w), bwd)


def embedding(table, ids) -> Tensor:
    """Gather rows of `table` (V, d) by integer ids (S,)."""
    table = wrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding ids must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accum(gt)

    return _node(table.data[idx], (table,), bwd)


def rmsnorm(x) -> Tensor:
    """Row-wise RMS normalization, parameter-free."""
    x = wrap(x)
    d = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + RMS_EPS
    inv = 1.0 / np.sqrt(ms)
    out = x.data * inv

    def bwd(g):
        if x.requires_grad:
            dot = np.sum(g * x.data, axis=-1, keepdims=True)
            x._accum(inv * g - (inv ** 3) * x.data * (dot / d))

    return _node(out, (x,), bwd)


def gelu(x) -> Tensor:
    """GeLU, tanh approximation."""
    x = wrap(x)
    v = x.data
    u = _GELU_C * (v + _GELU_A * v ** 3)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            x._accum(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))

    return _node(out, (x,), bwd)


def causal_attention(q, k, v, n_heads: int) -> Tensor:
    """Multi-head causal self-attention over packed (S, d) projections.

    Position i attends to positions <= i only. Scores are scaled by
    1/sqrt(head_dim); the softmax is max-stabilized per row.
    """
    q, k, v = wrap(q), wrap(k), wrap(v)
    S, d = q.data.shape
    if d % n_heads != 0:
        raise ValueError("model width not divisible by head count")
    dh = d // n_heads
    qh = q.data.reshape(S, n_heads, dh)
    kh = k.data.reshape(S, n_heads, dh)
    vh = v.data.reshape(S, n_heads, dh)
    scores = np.einsum("ihd,jhd->hij", qh, kh) / math.sqrt(dh)
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)
    scores = np.where(mask[None, :, :], -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("hij,jhd->ihd", w, vh).reshape(S, d)

    def bwd(g):
        gh = g.reshape(S, n_heads, dh)
        if v.requires_grad:
            v._accum(np.einsum("hij,ihd->jhd", w, gh).reshape(S, d))
        if q.requires_grad or k.requires_grad:
            gw = np.einsum("ihd,jhd->hij", gh, vh)
            gs = w * (gw - np.sum(gw * w, axis=-1, keepdims=True))
            gs /= math.sqrt(dh)
            if q.requires_grad:
                q._accum(np.einsum("hij,jhd->ihd", gs, kh).reshape(S, d))
            if k.requires_grad:
                k._accum(np.einsum("hij,ihd->jhd", gs, qh).reshape(S, d))

    return _node(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# probability ops


def _softmax2d(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> np.ndarray:
    """Stable softmax of a plain vector. Output sums to 1 within 1e-12."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    return _softmax2d(z[None, :])[0]


def softmax_rows(x) -> Tensor:
    """Row-wise softmax as a graph op."""
    x = wrap(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input must be finite")
    p = _softmax2d(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return _node(p, (x,), bwd)


def kl_divergence(p, q) -> float:
    """Sum of p_j * log(p_j / q_j) over a pair of simplex vectors.

    Zero-probability p entries contribute exactly zero; q must be strictly
    positive wherever p is positive. Log arguments are floored at 1e-30.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("kl_divergence expects two vectors of equal length")
    if np.any(p < 0):
        raise ValueError("p must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("kl_divergence arguments must sum to 1")
    if np.any((q <= 0) & (p > 0)):
        raise ValueError("q has zero mass where p is positive")
    mask = p > 0
    ps = p[mask]
    qs = np.maximum(q[mask], LOG_FLOOR)
    return float(np.sum(ps * (np.log(np.maximum(ps, LOG_FLOOR)) - np.log(qs))))


def kl_divergence_rows(p: np.ndarray, q, reduce: str = "sum") -> Tensor:
    """KL(p_i || q_i) summed (or averaged) over rows; p is a detached constant.

    Gradient flows into q only. Used for both full-vocabulary distillation and
    pooled knowledge transfer.
    """
    p = np.asarray(p, dtype=np.float64)
    q = wrap(q)
    if p.shape != q.data.shape:
        raise ValueError("kl_divergence_rows shape mismatch")
    if reduce not in ("sum", "mean"):
        raise ValueError("reduce must be 'sum' or 'mean'")
    qc = np.maximum(q.data, LOG_FLOOR)
    pc = np.maximum(p, LOG_FLOOR)
    terms = np.where(p > 0, p * (np.log(pc) - np.log(qc)), 0.0)
    total = terms.sum()
    n_rows = p.shape[0] if p.ndim > 1 else 1
    w = 1.0 / n_rows if reduce == "mean" else 1.0
    out = np.asarray(total * w)

    def bwd(g):
        if q.requires_grad:
            q._accum(np.where(p > 0, -p / qc, 0.0) * (float(g) * w))

    return _node(out, (q,), bwd)


def cross_entropy_at(logits, targets, positions) -> Tensor:
    """Mean next-token cross-entropy over the given positions.

    logits: (S, V) graph node; targets[i] is the label for row positions[i].
    """
    logits = wrap(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    S, V = logits.data.shape
    if tgt.size == 0 or tgt.shape != pos.shape:
        raise ValueError("cross_entropy_at needs matching non-empty targets/positions")
    if pos.min() < 0 or pos.max() >= S:
        raise ValueError("cross_entropy_at position out of range")
    if tgt.min() < 0 or tgt.max() >= V:
        raise ValueError("cross_entropy_at target id out of range")
    rows = logits.data[pos]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    n = tgt.size
    loss = float(np.mean(lse - rows[np.arange(n), tgt]))

    def bwd(g):
        if logits.requires_grad:
            p = _softmax2d(rows)
            p[np.arange(n), tgt] -= 1.0
            gl = np.zeros_like(logits.data)
            np.add.at(gl, pos, p * (float(g) / n))
            logits._accum(gl)

    return _node(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(loss_fn, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must rebuild its graph on every call and return a scalar Tensor.
    The error for each trainable scalar is |analytic - fd| / max(1, |analytic|).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ValueError("loss_fn must return a scalar Tensor")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss_fn().item()
            flat[i] = keep - eps
            lo = loss_fn().item()
            flat[i] = keep
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise ValueError("non-finite loss during gradient probe")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
