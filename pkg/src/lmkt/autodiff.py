"""Reverse-mode autodiff over float64 numpy arrays.

Exactly the primitive set a small causal decoder needs: matmul, row softmax,
layer norm, masked cross-entropy, embedding lookup, and a handful of
elementwise/shape ops. The graph is a dynamic tape rebuilt on every forward
pass; ``backward`` walks it in reverse topological order. Everything is f64
so central-difference gradient checks can be tight.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

ArrayLike = np.ndarray | Sequence | float | int


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    """A forward op produced NaN or Inf; the engine treats that as corruption."""


class EmptyLossMaskError(AutodiffError):
    pass


class MissingGradError(AutodiffError):
    pass


_GRAD_ENABLED = True
# Finite checks on every op are cheap at desk scale and catch divergence at
# the op that produced it instead of steps later.
FINITE_CHECKS = True


@contextmanager
def no_grad():
    """Disable tape recording (inference / finite-difference probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense f64 array plus an optional grad buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor],
          bw: Callable[[np.ndarray], None]) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Grads accumulate across separate graphs sharing a leaf; the training
    loop zeroes them between steps.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    # Iterative topo sort; forward graphs for long sequences exceed the
    # default recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones((), dtype=np.float64))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(out_data, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports (m,n) + (n,) row-bias broadcast."""
    if a.shape == b.shape:
        out_data = a.data + b.data

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out_data = a.data + b.data

        def bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))

    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _node(out_data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _node(out_data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * c)

    return _node(out_data, "scale", (a,), bw)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=np.float64)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.shape).astype(np.float64))

    return _node(out_data, "sum", (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU (the GPT-2 flavor)."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
            x._accum(g * dx)

    return _node(out_data, "gelu", (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            x._accum(out_data * (g - dot))

    return _node(out_data, "softmax_rows", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            mean_dxhat = dxhat.mean(axis=1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accum(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))

    return _node(out_data, "layer_norm", (x, gain, bias), bw)


def cross_entropy_masked(logits: Tensor, targets: np.ndarray,
                         mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[t, targets[t]] over positions where mask is true."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_masked needs 2-D logits, got {logits.shape}")
    t_len, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (t_len,) or mask.shape != (t_len,):
        raise ShapeError(
            f"targets/mask must have length {t_len}, got {targets.shape}/{mask.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= vocab:
        raise ShapeError(f"targets out of range for vocab size {vocab}")
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise EmptyLossMaskError("cross_entropy_masked: mask selects no positions")

    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(mask)[0]
    out_data = np.asarray(-logp[rows, targets[rows]].mean(), dtype=np.float64)

    def bw(g: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(logp[rows])
            probs[np.arange(n_sel), targets[rows]] -= 1.0
            gl = np.zeros_like(logits.data)
            gl[rows] = probs * (float(g) / n_sel)
            logits._accum(gl)

    return _node(out_data, "cross_entropy_masked", (logits,), bw)


def embedding_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding_rows expects a 1-D id array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table {table.shape}")
    out_data = table.data[ids]

    def bw(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accum(gt)

    return _node(out_data, "embedding_rows", (table,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out_data = np.ascontiguousarray(a.data.T)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g.T)

    return _node(out_data, "transpose", (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"bad column slice [{start}:{stop}] of {a.shape}")
    out_data = np.ascontiguousarray(a.data[:, start:stop])

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, start:stop] = g
            a._accum(ga)

    return _node(out_data, "slice_cols", (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of zero parts")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols parts must be 2-D with equal row counts")
    widths = [p.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def bw(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(np.ascontiguousarray(g[:, lo:hi]))

    return _node(out_data, "concat_cols", tuple(parts), bw)


def replace_row(x: Tensor, position: int, v: Tensor) -> Tensor:
    """Copy of x with one row substituted by v; grads split accordingly."""
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"replace_row: incompatible shapes {x.shape} / {v.shape}")
    if not (0 <= position < x.shape[0]):
        raise ShapeError(f"replace_row position {position} out of range for {x.shape}")
    out_data = x.data.copy()
    out_data[position] = v.data

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = g.copy()
            gx[position] = 0.0
            x._accum(gx)
        if v.requires_grad:
            v._accum(g[position].copy())

    return _node(out_data, "replace_row", (x, v), bw)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Moment buffers are positionally aligned with ``params`` so the whole
    state round-trips through checkpoints.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradError("adam step with a parameter whose grad is unset")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5) -> float:
    """Max relative error between analytic grad of f at x and central differences.

    Relative error per coordinate is |analytic - numeric| / (|analytic| +
    |numeric| + 1e-6). The 1e-6 floor keeps float64 cancellation noise in the
    difference quotient (about 1e-10 absolute for unit-scale losses) from
    dominating coordinates whose true gradient is essentially zero.
    """
    x.zero_grad()
    loss = f(x)
    backward(loss)
    if x.grad is None:
        raise MissingGradError("finite_diff_check: f does not reach x")
    analytic = x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-6)
    return float(rel.max())
