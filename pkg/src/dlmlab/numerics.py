"""Dense float64 tensors with tape-based reverse-mode autodiff.

Only the operations needed by the toy diffusion LM and the sparse autoencoders
are provided. Several are fused (softmax, layer norm, cross-entropy, ReLU+TopK)
so the tape stays short and the backward rules stay exact.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the tape node that produced it.

    ``parents`` and ``backward_fn`` form the tape node: ``backward_fn`` maps the
    output gradient to one gradient per parent (``None`` for parents that do not
    need one).
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self, seed=None) -> None:
        backward(self, seed)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * a.data * g,)

    return _make(a.data * a.data, (a,), bw, "square")


def tabs(a: Tensor) -> Tensor:
    def bw(g):
        return (np.sign(a.data) * g,)

    return _make(np.abs(a.data), (a,), bw, "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: ids out of range for table of shape {table.shape}")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "take_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- fused ops


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        ggain = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Scalar ``sum_i weights[i] * -log softmax(logits[i])[targets[i]]``.

    ``logits`` has shape (..., V); ``targets`` and ``weights`` match the
    leading shape. Zero weights contribute nothing, including to the gradient.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}"
        )
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = weights.reshape(-1)
    logp = log_softmax_np(flat)
    nll = -logp[np.arange(t.size), t]
    value = float((w * nll).sum())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(t.size), t] -= 1.0
        return ((float(g) * w[:, None] * p).reshape(logits.shape),)

    return _make(np.asarray(value), (logits,), bw, "cross_entropy")


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lowest index. Result rows are ordered by descending value.
    """
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., : min(k, values.shape[-1])]


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask selecting the same entries as ``topk_indices``, without a full sort."""
    n = values.shape[-1]
    if k >= n:
        return np.ones(values.shape, dtype=bool)
    kth = -np.partition(-values, k - 1, axis=-1)[..., k - 1 : k]
    greater = values > kth
    need = k - greater.sum(axis=-1, keepdims=True)
    tied = values == kth
    return greater | (tied & (np.cumsum(tied, axis=-1) <= need))


def relu_topk(pre: Tensor, k: int) -> Tensor:
    """ReLU followed by keeping the ``k`` largest values per row.

    Gradient flows only through kept coordinates with positive value.
    """
    if k < 1:
        raise ValueError(f"relu_topk: k must be >= 1, got {k}")
    act = np.maximum(pre.data, 0.0)
    keep = topk_mask(act, k) & (act > 0)
    out = np.where(keep, act, 0.0)

    def bw(g):
        return (g * keep,)

    return _make(out, (pre,), bw, "relu_topk")


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if not out.requires_grad:
        raise BackwardError("backward called on a tensor with no recorded forward pass")
    if seed is None:
        if out.data.size != 1:
            raise BackwardError(f"implicit seed needs a scalar output, got shape {out.shape}")
        seed = np.ones_like(out.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {out.shape}")

    grads: dict[int, np.ndarray] = {id(out): seed}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return loss.item(), [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords: Iterable[tuple[int, int]] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / (|numeric| + eps).

    ``loss_fn`` is re-evaluated with each coordinate nudged by +-eps (central
    differences). Raises ``FloatingPointError`` naming every coordinate where
    the perturbed loss is not finite.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = gradients(loss_fn, params)
    if coords is None:
        coords = ((pi, j) for pi, p in enumerate(params) for j in range(p.data.size))
    worst = 0.0
    bad: list[tuple[int, int]] = []
    with no_grad():
        for pi, j in coords:
            flat = params[pi].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                bad.append((pi, j))
                continue
            numeric = (up - down) / (2 * eps)
            a = analytic[pi].reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / (abs(numeric) + eps))
    if bad:
        raise FloatingPointError(f"non-finite loss at perturbed coordinates (param, index): {bad}")
    return worst


class Adam:
    """Adam with optional global grad-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
