"""Small reverse-mode autodiff engine on top of numpy.

Only the operators the prototype network needs are provided. Every op
records a closure that pushes the output gradient back to its inputs; the
graph is walked in reverse topological order by :meth:`Tensor.backward`
and then released, so a graph can be differentiated exactly once.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.size == 0:
            raise ValueError("empty tensors are not supported")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backprop --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # release the graph: one backward pass per tape
            node._parents = ()
            node._backward = _consumed

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _consumed(_g):
    raise GraphError("graph already consumed by a previous backward pass")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` may be a same-shape tensor or a constant array."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim and c.shape != a.shape:
            raise ValueError(f"mul: constant shape {c.shape} does not match {a.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def sum_(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.dtype)
        return _make(out, (x,), lambda g: (np.broadcast_to(g, src).astype(x.dtype),))
    out = x.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).astype(x.dtype),)

    return _make(out, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., C] @ b[C, D]``; leading axes of ``a`` are treated as a batch."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is None:
        return out
    bd = b.data

    def back(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(out.data + bd, (out, b), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot: needs equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C_in,H,W]`` with ``weight[C_out,C_in,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def mean_spatial(x: Tensor) -> Tensor:
    """Average over the two trailing (spatial) axes."""
    if x.ndim < 2:
        raise ValueError("mean_spatial needs at least 2 dims")
    h, w = x.shape[-2:]
    src = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(-2, -1))

    def back(g):
        return (np.broadcast_to((g * inv)[..., None, None], src).astype(x.dtype),)

    return _make(out.astype(x.dtype), (x,), back)


def max_spatial(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max over trailing ``[H, W]`` axes.

    Returns the values and an integer array of ``(row, col)`` peaks with
    shape ``x.shape[:-2] + (2,)``. Ties resolve to the first maximum in
    row-major order (``np.argmax`` semantics).
    """
    if x.ndim < 2:
        raise ValueError("max_spatial needs at least 2 dims")
    h, w = x.shape[-2:]
    flat = x.data.reshape(-1, h * w)
    idx = flat.argmax(axis=1)
    vals = flat[np.arange(flat.shape[0]), idx].reshape(x.shape[:-2])
    peaks = np.stack([idx // w, idx % w], axis=-1).reshape(x.shape[:-2] + (2,))
    src = x.shape

    def back(g):
        gx = np.zeros((flat.shape[0], h * w), dtype=x.dtype)
        gx[np.arange(flat.shape[0]), idx] = np.reshape(g, -1)
        return (gx.reshape(src),)

    return _make(np.asarray(vals, dtype=x.dtype), (x,), back), peaks


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_ce(logits: Tensor, target) -> Tensor:
    """Cross-entropy of ``logits[N, Y]`` (or ``[Y]``) against integer targets,
    averaged over the batch."""
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != z.shape[0]:
        raise ValueError("softmax_ce: one target per row required")
    if np.any(t < 0) or np.any(t >= z.shape[1]):
        raise ValueError("softmax_ce: target index out of range")
    logp = _log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, t].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def mse(a: Tensor, b) -> Tensor:
    """Sum of squared differences over the last axis, averaged over any
    leading batch axes (a plain vector yields the sum of squares)."""
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.dtype)
    if a.shape != bd.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {bd.shape}")
    d = a.data - bd
    nb = int(np.prod(a.shape[:-1])) if a.ndim > 1 else 1
    out = np.asarray((d * d).sum() / nb, dtype=a.dtype)

    def back(g):
        ga = (2.0 / nb) * g * d
        return (ga.astype(a.dtype), (-ga).astype(a.dtype) if isinstance(b, Tensor) else None)

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _make(out, parents, back)


def group_l2(x: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Sum over groups and columns of the l2 norm of ``x[group, c]``.

    Rows outside every group do not contribute. The subgradient at a zero
    norm is taken as zero.
    """
    if x.ndim != 2:
        raise ValueError("group_l2 expects a 2-d tensor")
    total = 0.0
    norms = []
    for grp in groups:
        if len(grp) == 0:
            raise ValueError("group_l2: empty group")
        n = np.sqrt((x.data[list(grp)] ** 2).sum(axis=0))
        norms.append(n)
        total += n.sum()

    def back(g):
        gx = np.zeros_like(x.data)
        for grp, n in zip(groups, norms):
            safe = np.where(n > 0, n, 1)
            gx[list(grp)] += g * np.where(n > 0, x.data[list(grp)] / safe, 0)
        return (gx,)

    return _make(np.asarray(total, dtype=x.dtype), (x,), back)


# ---------------------------------------------------------------------------
# interpolation (forward only)
# ---------------------------------------------------------------------------

def bilinear_upsample(m, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a map ``[..., H, W]``."""
    arr = m.data if isinstance(m, Tensor) else np.asarray(m)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_upsample: target size must be positive, got {out_h}x{out_w}")
    h, w = arr.shape[-2:]
    ys = np.linspace(0, h - 1, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0, w - 1, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = arr[..., y0, :][..., :, x0] * (1 - wx) + arr[..., y0, :][..., :, x1] * wx
    bot = arr[..., y1, :][..., :, x0] * (1 - wx) + arr[..., y1, :][..., :, x1] * wx
    out = top * (1 - wy) + bot * wy
    # clamp rounding drift so the output range never exceeds the input range
    lo = arr.min(axis=(-2, -1), keepdims=True)
    hi = arr.max(axis=(-2, -1), keepdims=True)
    return np.clip(out, lo, hi).astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6, floor: float = 1e-4) -> float:
    """Worst component-wise relative error between backprop and central
    differences of ``fn`` at ``point``.

    The relative error uses ``max(|analytic|, |numeric|, floor)`` as the
    denominator so that near-zero components are compared absolutely.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ValueError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(base.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
