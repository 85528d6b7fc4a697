"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values live in numpy arrays; the autodiff is hand-rolled. Every primitive
records itself on a module-level tape when gradients are being tracked, and
``backward`` replays the tape in reverse, accumulating gradients in tape
order so repeated runs are bit-identical.

The primitive set is exactly what the sequence model needs: elementwise
add/mul with trailing-dimension broadcasting, 2-D matmul (plus the 1-D
vector cases), transpose, embedding lookup, layer norm, causal and plain
row softmax, a fused softmax cross-entropy, tanh/sigmoid/relu, scalar
scaling, sum/mean reductions, and row slice/stack. No general broadcasting,
no higher-order derivatives.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, StateError

DEFAULT_DTYPE = np.float64


def _check_finite(primitive: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{primitive}: produced non-finite values")


class Tensor:
    """A shaped buffer of real values, optionally carrying a gradient."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar for the common cases; canonical API is the functions below.
    def __add__(self, other):
        return add(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(values, dtype=None) -> Tensor:
    """A leaf tensor that participates in gradient computation."""
    return Tensor(values, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    # Maps the output gradient to one gradient (or None) per input.
    backward_fn: Callable[[np.ndarray], tuple]


_TAPE: list[TapeRecord] = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_length() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


def _make(op: str, values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(op, values)
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        _TAPE.append(TapeRecord(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``; clears the tape.

    The loss must be scalar. Gradients accumulate into existing ``grad``
    buffers (cleared by the optimizer step), in reverse tape order.
    """
    if loss.values.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    if not _TAPE:
        raise ContractError("backward: tape is empty")
    output_ids = {id(rec.output) for rec in _TAPE}
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.values.dtype)}
    for rec in reversed(_TAPE):
        g_out = pending.pop(id(rec.output), None)
        if g_out is None:
            continue
        in_grads = rec.backward_fn(g_out)
        for tens, g_in in zip(rec.inputs, in_grads):
            if g_in is None or not tens.requires_grad:
                continue
            _check_finite(f"{rec.op}.backward", g_in)
            if id(tens) in output_ids:
                acc = pending.get(id(tens))
                pending[id(tens)] = g_in if acc is None else acc + g_in
            elif tens.grad is None:
                tens.grad = np.array(g_in, copy=True)
            else:
                tens.grad += g_in
    clear_tape()


# ---------------------------------------------------------------------------
# Elementwise primitives (trailing-dimension broadcasting only)
# ---------------------------------------------------------------------------


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sb == () or sa == ():
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise ShapeError(op, sa, sb)


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    vals = a.values + b.values

    def bw(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _make("add", vals, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    vals = a.values * b.values
    av, bv = a.values, b.values

    def bw(g):
        return _reduce_to(a.shape, g * bv), _reduce_to(b.shape, g * av)

    return _make("mul", vals, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make("scale", a.values * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k]@[k,n] -> [m,n]; also the 1-D cases [k]@[k,n] and [m,k]@[k]."""
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    vals = av @ bv

    def bw(g):
        if av.ndim == 1 and bv.ndim == 2:      # [k]@[k,n] -> [n]
            return g @ bv.T, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:      # [m,k]@[k] -> [m]
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 1:      # [k]@[k] -> scalar
            return g * bv, g * av
        return g @ bv.T, av.T @ g              # [m,k]@[k,n]

    return _make("matmul", vals, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError("transpose", a.shape)

    def bw(g):
        return (g.T,)

    return _make("transpose", a.values.T, (a,), bw)


# ---------------------------------------------------------------------------
# Lookup, normalization, nonlinearities
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows ``table[ids]``; gradient scatters back with np.add.at (deterministic)."""
    if table.values.ndim != 2:
        raise ShapeError("embedding-lookup", table.shape)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embedding-lookup", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding-lookup: id out of range for table with {table.shape[0]} rows"
        )
    vals = table.values[idx]

    def bw(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("embedding-lookup", vals, (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer-norm", x.shape, gain.shape, bias.shape)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    vals = xhat * gain.values + bias.values

    def bw(g):
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        dgain = (flat_g * flat_xhat).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        dxhat = g * gain.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make("layer-norm", vals, (x, gain, bias), bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make("tanh", t, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.values))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def bw(g):
        return (g * (av > 0),)

    return _make("relu", np.maximum(av, 0.0), (a,), bw)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    xv = x.values
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make("row-softmax", p, (x,), bw)


def causal_softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax over the causal prefix of a square score matrix.

    Row i is a distribution over columns j <= i; columns j > i are exactly
    zero, so perturbing a future position cannot leak into earlier rows.
    """
    sv = scores.values
    if sv.ndim != 2 or sv.shape[0] != sv.shape[1]:
        raise ShapeError("causal-softmax", scores.shape)
    n = sv.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    masked = np.where(mask, sv, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (p * g).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make("causal-softmax", p, (scores,), bw)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], weights: Sequence[float]) -> Tensor:
    """Fused scalar loss: sum_k weights[k] * (-log softmax(logits[k])[targets[k]]).

    Numerically stable via log-sum-exp; rows with weight zero contribute
    neither loss nor gradient.
    """
    lv = logits.values
    if lv.ndim != 2:
        raise ShapeError("softmax-cross-entropy", logits.shape)
    t = np.asarray(targets, dtype=np.intp)
    w = np.asarray(weights, dtype=lv.dtype)
    if t.shape != (lv.shape[0],) or w.shape != (lv.shape[0],):
        raise ShapeError("softmax-cross-entropy", logits.shape, t.shape, w.shape)
    if t.size and (t.min() < 0 or t.max() >= lv.shape[1]):
        raise ContractError("softmax-cross-entropy: target id out of range")
    m = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = np.log(z[:, 0]) + m[:, 0]
    picked = lv[np.arange(lv.shape[0]), t]
    vals = np.asarray((w * (lse - picked)).sum())

    def bw(g):
        dl = p * w[:, None]
        dl[np.arange(lv.shape[0]), t] -= w
        return (dl * g,)

    return _make("softmax-cross-entropy", vals, (logits,), bw)


# ---------------------------------------------------------------------------
# Reductions and row plumbing
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.full(shape, g, dtype=a.values.dtype),)

    return _make("sum", np.asarray(a.values.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    shape = a.shape

    def bw(g):
        return (np.full(shape, g / n, dtype=a.values.dtype),)

    return _make("mean", np.asarray(a.values.mean()), (a,), bw)


def row(a: Tensor, i: int) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError("row", a.shape)

    def bw(g):
        ga = np.zeros_like(a.values)
        ga[i] = g
        return (ga,)

    return _make("row", a.values[i], (a,), bw)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ContractError("stack-rows: empty input")
    d = rows[0].shape
    for r in rows:
        if r.shape != d:
            raise ShapeError("stack-rows", d, r.shape)
    vals = np.stack([r.values for r in rows])

    def bw(g):
        return tuple(g[i] for i in range(len(rows)))

    return _make("stack-rows", vals, tuple(rows), bw)


def sum_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Left fold of ``add`` in list order (deterministic accumulation)."""
    if not tensors:
        raise ContractError("sum_tensors: empty input")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return acc


# One dispatch point over the primitive set, mainly for oracle tests that
# want to enumerate every differentiable primitive.
PRIMITIVES: Mapping[str, Callable] = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "embedding-lookup": embedding_lookup,
    "layer-norm": layer_norm,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "row-softmax": row_softmax,
    "causal-softmax": causal_softmax,
    "softmax-cross-entropy": softmax_cross_entropy,
    "sum": sum_all,
    "mean": mean_all,
    "row": row,
    "stack-rows": stack_rows,
}


def forward_primitive(op: str, *operands, **kwargs) -> Tensor:
    if op not in PRIMITIVES:
        raise ContractError(f"unknown primitive {op!r}")
    return PRIMITIVES[op](*operands, **kwargs)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def _named_params(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def sgd_step(params, lr: float) -> None:
    """p <- p - lr * grad(p) for every parameter; gradients are cleared.

    ``params`` is a name->Tensor mapping or an iterable of Tensors. A
    parameter without a populated gradient raises StateError.
    """
    if lr < 0:
        raise ContractError("sgd_step: negative learning rate")
    named = _named_params(params)
    for name, p in named:
        if p.grad is None:
            raise StateError(f"sgd_step: parameter {name!r} has no gradient")
    for _, p in named:
        p.values -= lr * p.grad
        p.grad = None


class Adam:
    """Adam with bias correction, behind the same step contract as sgd_step."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        named = _named_params(params)
        for name, p in named:
            if p.grad is None:
                raise StateError(f"adam: parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in named:
            g = p.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.values)
                v = np.zeros_like(p.values)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def zero_grads(params) -> None:
    for _, p in _named_params(params):
        p.grad = None
