"""Minimal dense-tensor kernel with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over numpy arrays and an analytic ``backward``.  Calling an
operation records a node on the output tensor; :func:`backward` walks the
recorded graph in reverse topological order.

All values are float64 and C-contiguous.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "Function",
    "GradCheckReport",
    "backward",
    "matmul",
    "linear",
    "softmax",
    "layer_norm",
    "gelu",
    "add",
    "scale",
    "concat",
    "split",
    "take",
    "reshape",
    "transpose",
    "swapaxes",
    "broadcast_to",
    "mean",
    "cross_entropy",
    "grad_check",
    "count_macs",
]


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("fn", "ctx", "inputs")

    def __init__(self, fn, ctx, inputs):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs


class Function:
    """Base class for a differentiable operation.

    ``forward(ctx, *arrays, **kw)`` returns the output array and may stash
    whatever it needs on ``ctx`` (a plain dict; ``ctx["needs"]`` flags which
    inputs require grad).  ``backward(ctx, grad)`` returns one gradient (or
    ``None``) per tensor input.
    """

    @staticmethod
    def forward(ctx: dict, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx: dict = {"needs": [t.requires_grad for t in inputs]}
        out = cls.forward(ctx, *(t.data for t in inputs), **kwargs)
        needs = any(t.requires_grad for t in inputs)
        node = _Node(cls, ctx, inputs) if needs else None
        return Tensor(out, requires_grad=needs, _node=node)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Propagate ``grad`` (default ones) from ``root`` into leaf ``.grad`` slots.

    Leaf gradients accumulate; intermediate gradients are not retained.
    """
    if not root.requires_grad:
        raise ValueError("tensor does not require grad; nothing to differentiate")
    g0 = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    if g0.shape != root.shape:
        raise ValueError(f"seed gradient shape {g0.shape} != output shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): g0}
    for t in reversed(_topo_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.fn.backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation

_mac_log: list[defaultdict] = []


@contextlib.contextmanager
def count_macs() -> Iterator[defaultdict]:
    """Record multiply-accumulates of every ``matmul`` in the block, keyed by tag."""
    counter: defaultdict = defaultdict(int)
    _mac_log.append(counter)
    try:
        yield counter
    finally:
        _mac_log.remove(counter)


# ---------------------------------------------------------------------------
# operations


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b, tag=None):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
            raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        if _mac_log:
            macs = math.prod(a.shape) * b.shape[-1]
            for counter in _mac_log:
                counter[tag] += macs
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        da = g @ np.swapaxes(b, -1, -2) if ctx["needs"][0] else None
        if not ctx["needs"][1]:
            db = None
        elif b.ndim == 2:
            k, n = b.shape
            db = a.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(a, -1, -2) @ g
        return da, db


def matmul(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    return MatMul.apply(a, b, tag=tag)


class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b, tag=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ValueError(f"linear shape mismatch: x{x.shape}, w{w.shape}, b{b.shape}")
        ctx["x"], ctx["w"] = x, w
        if _mac_log:
            macs = x.size * w.shape[1]
            for counter in _mac_log:
                counter[tag] += macs
        out = x @ w
        out += b
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx["x"], ctx["w"]
        k, n = w.shape
        g2 = g.reshape(-1, n)
        dx = g @ w.T if ctx["needs"][0] else None
        return dx, x.reshape(-1, k).T @ g2, g2.sum(axis=0)


def linear(x: Tensor, w: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis (a matmul followed by a bias add)."""
    return Linear.apply(x, w, b, tag=tag)


class Softmax(Function):
    @staticmethod
    def forward(ctx, x):
        if np.isnan(x).any():
            raise ValueError("softmax input contains NaN")
        p = x - x.max(axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        ctx["p"] = p
        return p

    @staticmethod
    def backward(ctx, g):
        p = ctx["p"]
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return Softmax.apply(x)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-6):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ValueError(
                f"layer_norm width mismatch: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        ctx["xhat"], ctx["rstd"], ctx["gamma"] = xhat, rstd, gamma
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx["xhat"], ctx["rstd"], ctx["gamma"]
        d = xhat.shape[-1]
        g2 = g.reshape(-1, d)
        dgamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g * gamma
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each last-axis slice with the biased variance, then scale and shift."""
    return LayerNorm.apply(x, gamma, beta, eps=eps)


_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu(Function):
    @staticmethod
    def forward(ctx, x):
        cdf = ndtr(x)  # standard normal CDF, 0.5 * (1 + erf(x / sqrt 2))
        ctx["x"], ctx["cdf"] = x, cdf
        return x * cdf

    @staticmethod
    def backward(ctx, g):
        x, cdf = ctx["x"], ctx["cdf"]
        d = x * x
        d *= -0.5
        np.exp(d, out=d)
        d *= x
        d *= _INV_SQRT2PI
        d += cdf
        d *= g
        return (d,)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    return Gelu.apply(x)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        if b.shape != a.shape[a.ndim - b.ndim:]:
            raise ValueError(f"add: {b.shape} is not a trailing suffix of {a.shape}")
        ctx["lead"] = a.ndim - b.ndim
        ctx["bshape"] = b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        if ctx["lead"] == 0:
            return g, g
        return g, g.reshape(-1, *ctx["bshape"]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing suffix of ``a``'s shape."""
    return Add.apply(a, b)


class Scale(Function):
    @staticmethod
    def forward(ctx, x, factor=1.0):
        ctx["factor"] = factor
        return x * factor

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["factor"],)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx["axis"] = axis
        ctx["sizes"] = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            shapes = [a.shape for a in arrays]
            raise ValueError(f"concat along axis {axis} of incompatible shapes {shapes}") from exc

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx["sizes"])[:-1]
        return np.split(g, cuts, axis=ctx["axis"])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Slice(Function):
    @staticmethod
    def forward(ctx, x, axis=0, start=0, stop=None):
        ctx["shape"], ctx["axis"], ctx["start"], ctx["stop"] = x.shape, axis, start, stop
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return x[tuple(index)]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"])
        index = [slice(None)] * out.ndim
        index[ctx["axis"]] = slice(ctx["start"], ctx["stop"])
        out[tuple(index)] = g
        return (out,)


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Cut ``x`` along ``axis`` into consecutive pieces of the given sizes."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis] or any(s < 1 for s in sizes):
        raise ValueError(f"split sizes {list(sizes)} do not partition axis {axis} of {x.shape}")
    parts = []
    start = 0
    for size in sizes:
        parts.append(Slice.apply(x, axis=axis, start=start, stop=start + size))
        start += size
    return parts


def take(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    piece = Slice.apply(x, axis=axis, start=index, stop=index + 1)
    return reshape(piece, x.shape[:axis] + x.shape[axis + 1:])


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=None):
        if math.prod(shape) != x.size:
            raise ValueError(f"cannot reshape {x.shape} into {tuple(shape)}")
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class SwapAxes(Function):
    @staticmethod
    def forward(ctx, x, a1=-2, a2=-1):
        ctx["axes"] = (a1, a2)
        return np.ascontiguousarray(np.swapaxes(x, a1, a2))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.swapaxes(g, *ctx["axes"])),)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    if x.ndim < 2:
        raise ValueError(f"swapaxes needs rank >= 2, got {x.shape}")
    return SwapAxes.apply(x, a1=a1, a2=a2)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -2, -1)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, x, shape=None):
        if tuple(shape[len(shape) - x.ndim:]) != x.shape:
            raise ValueError(f"cannot broadcast {x.shape} to {tuple(shape)}")
        ctx["shape"] = x.shape
        return np.broadcast_to(x, shape).copy()

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(-1, *ctx["shape"]).sum(axis=0),)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Replicate ``x`` along new leading axes."""
    return BroadcastTo.apply(x, shape=tuple(shape))


class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        ctx["shape"], ctx["axis"] = x.shape, axis
        return x.mean(axis=axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx["shape"], ctx["axis"]
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / shape[axis],)


def mean(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim < 2:
        raise ValueError("mean would produce a rank-0 tensor")
    return Mean.apply(x, axis=axis)


class CrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels=None):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ValueError(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape}")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(len(labels))
        ctx["p"] = np.exp(shifted - logz[:, None])
        ctx["labels"] = labels
        return np.array([(logz - shifted[rows, labels]).mean()])

    @staticmethod
    def backward(ctx, g):
        p, labels = ctx["p"], ctx["labels"]
        d = p.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return (d * (g[0] / len(labels)),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    return CrossEntropy.apply(logits, labels=labels)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    worst_index: int
    flagged: bool = False

    @property
    def passed(self) -> bool:
        return not self.flagged and self.max_rel_error < 1e-5


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    name: str | None = None,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``op`` with central differences.

    The scalar probed is ``sum(op(*inputs) * R)`` for a fixed random ``R``.
    ``wrt`` restricts the check to some input positions (all by default).
    Relative error is ``|a - n| / max(1, |a|, |n|)``; any entry above 0.1 marks
    the report as flagged (likely a non-differentiable point or a wrong backward).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    tensors = [Tensor(np.array(as_tensor(x).data), requires_grad=True) for x in inputs]
    wrt = list(range(len(tensors))) if wrt is None else list(wrt)

    out = op(*tensors)
    weights = np.random.default_rng(seed).uniform(-1.0, 1.0, out.shape)
    backward(out, weights)

    def probe() -> float:
        return float((op(*tensors).data * weights).sum())

    worst, worst_at, offset = 0.0, 0, 0
    for i in wrt:
        t = tensors[i]
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = probe()
            flat[j] = keep - eps
            down = probe()
            flat[j] = keep
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst, worst_at = rel, offset + j
        offset += flat.size
    label = name or getattr(op, "__name__", "op")
    return GradCheckReport(label, worst, worst_at, flagged=worst > 0.1)
