"""Minimal reverse-mode differentiation over the tensor primitives.

Define-by-run tape: each op returns a Node holding the forward value, parent
references and a hand-written vjp closure. backward() walks the DAG once in
reverse topological order. The op set is small and fixed, so per-op backward
rules are cheaper and more transparent than expression-level autodiff.
"""

from __future__ import annotations

import json
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .tensor import (
    ShapeError,
    as_tensor,
    check_finite,
    load_tensor,
    save_tensor,
)


class ContractError(ValueError):
    """Raised when an autodiff contract is violated (e.g. non-scalar loss)."""


class OracleError(RuntimeError):
    """Raised when the finite-difference oracle hits non-finite values."""


#: sentinel returned by a vjp entry that accumulated into parent.grad itself
IN_PLACE = object()

# python floats stay "weak" under numpy promotion, keeping float32 paths float32
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Node:
    """One tape entry: a value plus how to push gradients to its parents.

    pending: optional callable that finishes deferred gradient accumulation
    into this node's grad buffer (run right before the node's own vjp).
    cache: scratch dict fused ops may use to memoize derived arrays.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad", "name",
                 "pending", "cache")

    def __init__(self, value, parents=(), vjp=None, requires_grad=None, name=""):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.pending = None
        self.cache = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def detach(self) -> "Node":
        return Node(self.value, (), None, requires_grad=False, name=self.name)

    def __repr__(self):
        return f"Node({self.name or 'op'}, shape={np.shape(self.value)}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def leaf(value, requires_grad=True, name="") -> Node:
    return Node(as_tensor(value), (), None, requires_grad=requires_grad, name=name)


def constant(value, dtype=None, name="const") -> Node:
    return Node(as_tensor(value, dtype), (), None, requires_grad=False, name=name)


def lift(x, dtype=None) -> Node:
    return x if isinstance(x, Node) else constant(x, dtype)


def _op(value, parents, vjp, name) -> Node:
    node = Node(value, parents, vjp, name=name)
    if node.requires_grad:
        check_finite(value, name)
    return node


def topological(root: Node) -> list[Node]:
    """Reverse-mode visit order: iterative post-order DFS over grad-requiring nodes."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, retain: bool = False, leaf_grads: dict | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad buffer.

    Leaves keep their accumulated gradients (so batch losses sum naturally);
    intermediate gradients are freed as soon as their vjp has run unless
    retain=True. When leaf_grads is given, leaf gradients go into that dict
    (keyed by node) instead of the shared .grad buffers, which lets
    independent samples run backward on worker threads and merge in a fixed
    order afterwards.
    """
    if np.size(loss.value) != 1:
        raise ContractError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    if not loss.requires_grad:
        return
    order = topological(loss)
    seed = np.ones_like(loss.value)
    if loss.grad is None:
        loss.grad = seed
    else:
        loss.grad = loss.grad + seed
    for node in reversed(order):
        if node.pending is not None:
            node.pending()
            node.pending = None
        gout = node.grad
        if gout is None or node.vjp is None:
            continue
        grads = node.vjp(gout)
        for parent, g in zip(node.parents, grads):
            if g is None or g is IN_PLACE or not parent.requires_grad:
                continue
            if g.shape != parent.value.shape:
                g = np.broadcast_to(g, parent.value.shape).copy()
            if leaf_grads is not None and parent.vjp is None and not parent.parents:
                prev = leaf_grads.get(parent)
                if prev is None:
                    leaf_grads[parent] = g.copy() if g.base is not None else g
                else:
                    prev += g
            elif parent.grad is None:
                parent.grad = g
            else:
                parent.grad += g
        if not retain:
            node.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops (limited numpy broadcasting; vjp folds broadcast axes back)
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _op(out, (a, b), vjp, "add")


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _op(out, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _op(out, (a, b), vjp, "mul")


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * out / b.value, b.value.shape),
        )

    return _op(out, (a, b), vjp, "div")


def neg(a) -> Node:
    a = lift(a)
    return _op(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a) -> Node:
    a = lift(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = lift(a)
    return _op(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a) -> Node:
    a = lift(a)
    out = np.sqrt(a.value)
    return _op(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def absolute(a) -> Node:
    a = lift(a)
    return _op(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def sigmoid(a) -> Node:
    a = lift(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Node:
    a = lift(a)
    out = np.tanh(a.value)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Node:
    """Exact GeLU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = lift(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _op(out, (a,), vjp, "gelu")


def stop_gradient(a) -> Node:
    a = lift(a)
    return Node(a.value, (), None, requires_grad=False, name="stop_gradient")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return _op(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = lift(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size / np.asarray(out).size

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.value.shape) / count).astype(a.value.dtype),)

    return _op(np.asarray(out), (a,), vjp, "mean")


def reshape(a, shape) -> Node:
    a = lift(a)
    old = a.value.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Node:
    a = lift(a)
    out = np.ascontiguousarray(a.value.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _op(out, (a,), vjp, "transpose")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [lift(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _op(out, nodes, vjp, "concat")


def slice_axis(a, axis: int, start: int, stop: int) -> Node:
    a = lift(a)
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(a.value[index])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _op(out, (a,), vjp, "slice")


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return _op(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# structured ops: convolution, pooling, standardization, interpolation
# ---------------------------------------------------------------------------

def _scratch(tag: str, shape, dtype) -> np.ndarray:
    """Transient per-call work buffer (never escapes the calling op)."""
    from ._kernels import workspace_buffer

    return workspace_buffer(tag, shape, dtype)


def conv2d_pm(x, weights, bias, H: int, W: int, frames: int = 1) -> Node:
    """Same-padding conv on pixel-major (frames*H*W, Cin) data; weights (k*k, Cin, Cout)."""
    x, weights = lift(x), lift(weights)
    bias = lift(bias) if bias is not None else None
    kk, Cin, Cout = weights.value.shape
    k = int(round(kk ** 0.5))
    p = k // 2
    from .tensor import _pad_pixels, conv2d_pm as _forward

    out = _forward(x.value, weights.value, bias.value if bias is not None else None,
                   H, W, frames)
    parents = (x, weights) + ((bias,) if bias is not None else ())

    def vjp(g):
        Hp, Wp = H + 2 * p, W + 2 * p
        N = frames * Hp * Wp
        if p == 0:
            dx = g @ weights.value[0].T
            dw = (x.value.T @ g)[None]
            grads = [dx, dw]
        else:
            xp = _pad_pixels(x.value, H, W, p, frames)
            gp = np.zeros((N, Cout), dtype=g.dtype)
            gp.reshape(frames, Hp, Wp, Cout)[:, p:p + H, p:p + W] = g.reshape(frames, H, W, Cout)
            dxp = np.zeros_like(xp)
            dw = np.empty_like(weights.value)
            tmp = _scratch("conv_bwd_tmp", (N, Cin), g.dtype)
            i = 0
            for dy in range(-p, p + 1):
                for dx_ in range(-p, p + 1):
                    d = dy * Wp + dx_
                    lo, hi = max(0, -d), min(N, N - d)
                    np.matmul(gp[lo:hi], weights.value[i].T, out=tmp[:hi - lo])
                    dxp[lo + d:hi + d] += tmp[:hi - lo]
                    np.matmul(xp[lo + d:hi + d].T, gp[lo:hi], out=dw[i])
                    i += 1
            dx = np.ascontiguousarray(
                dxp.reshape(frames, Hp, Wp, Cin)[:, p:p + H, p:p + W]
            ).reshape(frames * H * W, Cin)
            grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _op(out, parents, vjp, "conv2d")


def conv2d_cat_pm(parts, weights, bias, H: int, W: int, frames: int = 1) -> Node:
    """conv2d_pm over the channel concatenation of several nodes.

    Skips the explicit concat node: inputs are padded straight into one
    buffer and input gradients come back as per-part slices (no split copies).
    """
    parts = [lift(p) for p in parts]
    weights = lift(weights)
    bias = lift(bias) if bias is not None else None
    kk, Cin, Cout = weights.value.shape
    k = int(round(kk ** 0.5))
    p = k // 2
    widths = [q.value.shape[1] for q in parts]
    if sum(widths) != Cin:
        raise ShapeError(f"part channels {widths} do not sum to {Cin}")
    Hp, Wp = H + 2 * p, W + 2 * p
    N = frames * Hp * Wp
    xp = np.zeros((N, Cin), dtype=parts[0].value.dtype)
    xp4 = xp.reshape(frames, Hp, Wp, Cin)
    c0 = 0
    for q, w in zip(parts, widths):
        xp4[:, p:p + H, p:p + W, c0:c0 + w] = q.value.reshape(frames, H, W, w)
        c0 += w
    acc = np.zeros((N, Cout), dtype=xp.dtype)
    i = 0
    for dy in range(-p, p + 1):
        for dx in range(-p, p + 1):
            d = dy * Wp + dx
            lo, hi = max(0, -d), min(N, N - d)
            acc[lo:hi] += xp[lo + d:hi + d] @ weights.value[i]
            i += 1
    out = np.ascontiguousarray(
        acc.reshape(frames, Hp, Wp, Cout)[:, p:p + H, p:p + W]
    ).reshape(frames * H * W, Cout)
    if bias is not None:
        out = out + bias.value
    parents = tuple(parts) + (weights,) + ((bias,) if bias is not None else ())

    def vjp(g):
        gp = np.zeros((N, Cout), dtype=g.dtype)
        gp.reshape(frames, Hp, Wp, Cout)[:, p:p + H, p:p + W] = g.reshape(frames, H, W, Cout)
        dxp = np.zeros_like(xp)
        dw = np.empty_like(weights.value)
        tmp = _scratch("conv_bwd_tmp", (N, Cin), g.dtype)
        i = 0
        for dy in range(-p, p + 1):
            for dx_ in range(-p, p + 1):
                d = dy * Wp + dx_
                lo, hi = max(0, -d), min(N, N - d)
                np.matmul(gp[lo:hi], weights.value[i].T, out=tmp[:hi - lo])
                dxp[lo + d:hi + d] += tmp[:hi - lo]
                np.matmul(xp[lo + d:hi + d].T, gp[lo:hi], out=dw[i])
                i += 1
        dxp4 = dxp.reshape(frames, Hp, Wp, Cin)
        grads = []
        c0 = 0
        for w in widths:
            grads.append(np.ascontiguousarray(
                dxp4[:, p:p + H, p:p + W, c0:c0 + w]).reshape(frames * H * W, w))
            c0 += w
        grads.append(dw)
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _op(out, parents, vjp, "conv2d_cat")


def avg_pool_pm(x, H: int, W: int, k: int, frames: int = 1) -> Node:
    """k x k average pooling on pixel-major (frames*H*W, C) data."""
    x = lift(x)
    if k == 1:
        return x
    if H % k or W % k:
        raise ShapeError(f"extents {H}x{W} not divisible by pool kernel {k}")
    C = x.value.shape[1]
    Ho, Wo = H // k, W // k
    out = x.value.reshape(frames, Ho, k, Wo, k, C).mean(axis=(2, 4)).reshape(frames * Ho * Wo, C)

    def vjp(g):
        g6 = g.reshape(frames, Ho, 1, Wo, 1, C) / (k * k)
        dx = np.broadcast_to(g6, (frames, Ho, k, Wo, k, C)).astype(g.dtype)
        return (np.ascontiguousarray(dx).reshape(frames * H * W, C),)

    return _op(out, (x,), vjp, "avg_pool")


def avg_pool2d(a, k: int) -> Node:
    """Pooling over the trailing two dims of an arbitrary-rank node."""
    a = lift(a)
    from .tensor import avg_pool2d as _forward

    out = _forward(a.value, k)
    if k == 1:
        return _op(out, (a,), lambda g: (g,), "avg_pool2d")
    lead = a.value.shape[:-2]
    H, W = a.value.shape[-2:]

    def vjp(g):
        g6 = g.reshape(lead + (H // k, 1, W // k, 1)) / (k * k)
        dx = np.broadcast_to(g6, lead + (H // k, k, W // k, k)).astype(g.dtype)
        return (np.ascontiguousarray(dx).reshape(a.value.shape),)

    return _op(out, (a,), vjp, "avg_pool2d")


def standardize_columns(x, eps: float = 1e-5, frames: int = 1) -> Node:
    """Zero-mean unit-variance standardization of each column over the rows.

    The correspondence-normalization primitive: rows are spatial positions,
    columns are channels; population variance with an eps guard, so constant
    columns map to exactly zero. With stacked frames, statistics are per
    frame (each sample normalizes over its own spatial positions).
    """
    x = lift(x)
    v = x.value
    shape = v.shape
    v3 = v.reshape(frames, -1, shape[-1])
    mu = v3.mean(axis=1, keepdims=True)
    sigma2 = v3.var(axis=1, keepdims=True)
    std = np.sqrt(sigma2 + np.asarray(eps, dtype=v.dtype))
    y3 = (v3 - mu) / std
    # exactly-constant columns map to exactly zero (the mean of n equal values
    # can round, leaving ~1e-13 noise that would break the exactness contract)
    const_cols = (v3 == v3[:, :1, :]).all(axis=1, keepdims=True)
    if const_cols.any():
        y3 = np.where(const_cols, np.asarray(0.0, dtype=v.dtype), y3)
    y = y3.reshape(shape)

    def vjp(g):
        g3 = g.reshape(frames, -1, shape[-1])
        gm = g3.mean(axis=1, keepdims=True)
        gym = (g3 * y3).mean(axis=1, keepdims=True)
        return ((((g3 - gm - y3 * gym) / std).astype(v.dtype)).reshape(shape),)

    return _op(y, (x,), vjp, "standardize")


def bilinear_sample(src, coords) -> Node:
    """Differentiable bilinear sampling of a 2D field (zero-padding border).

    Reference implementation over generic nodes; the hot lookup paths use the
    fused kernels in correlation/deformable instead.
    """
    src, coords = lift(src), lift(coords)
    if src.value.ndim != 2:
        raise ShapeError(f"bilinear_sample expects a 2D source, got {src.value.shape}")
    H, W = src.value.shape
    pts = coords.value
    squeeze = pts.ndim == 1
    if squeeze:
        pts = pts[None, :]
    x = pts[..., 0]
    y = pts[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    corners = []
    out = np.zeros(x.shape, dtype=src.value.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            vals = np.where(ok, src.value[yi.clip(0, H - 1), xi.clip(0, W - 1)], 0.0)
            out += w * vals
            corners.append((dx, dy, xi, yi, ok, vals))
    if squeeze:
        out = out[0]

    def vjp(g):
        g = np.asarray(g)
        if squeeze:
            g = g[None]
        dsrc = np.zeros_like(src.value)
        gx = np.zeros_like(fx)
        gy = np.zeros_like(fy)
        for dx, dy, xi, yi, ok, vals in corners:
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            contrib = np.where(ok, g * wx * wy, 0.0)
            np.add.at(dsrc, (yi.clip(0, H - 1), xi.clip(0, W - 1)), contrib)
            gx += np.where(ok, g * wy * vals, 0.0) * (1.0 if dx else -1.0)
            gy += np.where(ok, g * wx * vals, 0.0) * (1.0 if dy else -1.0)
        dcoords = np.stack([gx, gy], axis=-1).astype(pts.dtype)
        if squeeze:
            dcoords = dcoords[0]
        return (dsrc, dcoords)

    return _op(out, (src, coords), vjp, "bilinear_sample")


_UPSAMPLE_MATS: dict = {}


def _upsample_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Dense 1D interpolation operator for the 2x upsampling (edge-clamped).

    Output centers sit at (i + 0.5)/2 - 0.5 in input coordinates. Dense
    matmuls beat scatter-based adjoints by a wide margin at these sizes.
    """
    key = (n_out, n_in, np.dtype(dtype))
    mat = _UPSAMPLE_MATS.get(key)
    if mat is None:
        pos = (np.arange(n_out) + 0.5) / 2.0 - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        t = np.clip(pos - lo, 0.0, 1.0)
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        np.add.at(mat, (np.arange(n_out), lo), 1.0 - t)
        np.add.at(mat, (np.arange(n_out), hi), t)
        mat = mat.astype(dtype)
        _UPSAMPLE_MATS[key] = mat
    return mat


def bilinear_upsample_2x_pm(x, Ho: int, Wo: int, frames: int = 1) -> Node:
    """Separable 2x bilinear upsampling of pixel-major (frames*Ho*Wo, C) data."""
    x = lift(x)
    C = x.value.shape[1]
    H2, W2 = Ho * 2, Wo * 2
    Ay = _upsample_matrix(H2, Ho, x.value.dtype)
    Ax = _upsample_matrix(W2, Wo, x.value.dtype)

    def interp(src, mat_y, mat_x, hi, wi):
        # rows: per-frame (hi, wi*C) gemm; cols: tensordot over the width axis
        s3 = src.reshape(frames, hi, wi * C)
        ho = mat_y.shape[0]
        wo = mat_x.shape[0]
        out = np.empty((frames, ho, wo, C), dtype=src.dtype)
        for b in range(frames):
            rows = mat_y @ s3[b]
            cols = np.tensordot(rows.reshape(ho, wi, C), mat_x, axes=([1], [1]))
            out[b] = cols.transpose(0, 2, 1)
        return out

    out = interp(x.value, Ay, Ax, Ho, Wo).reshape(frames * H2 * W2, C)

    def vjp(g):
        dsrc = interp(g, Ay.T, Ax.T, H2, W2)
        return (dsrc.reshape(frames * Ho * Wo, C),)

    return _op(out, (x,), vjp, "bilinear_upsample_2x")


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpointing
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter leaves plus matching gradient accumulators."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Node] = {}

    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        node = leaf(value, requires_grad=True, name=name)
        node.ensure_grad()
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def nodes(self) -> list[Node]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for node in self._params.values():
            if node.grad is None or node.grad.shape != node.value.shape:
                node.grad = np.zeros_like(node.value)
            else:
                node.grad.fill(0.0)

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(self.seed)
        for name, node in self._params.items():
            other.add(name, node.value.astype(dtype))
        return other

    def n_values(self) -> int:
        return sum(n.value.size for n in self._params.values())

    def save_checkpoint(self, directory, step: int = 0) -> None:
        os.makedirs(directory, exist_ok=True)
        pdir = os.path.join(directory, "params")
        os.makedirs(pdir, exist_ok=True)
        manifest = {"seed": self.seed, "step": int(step), "params": {}}
        for name, node in self._params.items():
            fname = name.replace("/", "_") + ".lgut"
            save_tensor(node.value, os.path.join(pdir, fname))
            manifest["params"][name] = os.path.join("params", fname)
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def load_checkpoint(self, directory) -> int:
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        for name, rel in manifest["params"].items():
            if name not in self._params:
                raise KeyError(f"checkpoint parameter {name!r} not in store")
            arr = load_tensor(os.path.join(directory, rel))
            node = self._params[name]
            if arr.shape != node.value.shape:
                raise ShapeError(f"checkpoint {name!r} shape {arr.shape} != {node.value.shape}")
            node.value = arr.astype(node.value.dtype)
        self.seed = int(manifest.get("seed", self.seed))
        return int(manifest.get("step", 0))


def clip_global_norm(params: Iterable[Node], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    nodes = [p for p in params if p.grad is not None]
    total = 0.0
    for p in nodes:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in nodes:
            p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


class Adam:
    """Standard first/second-moment optimizer with bias correction."""

    def __init__(self, params: Sequence[Node], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def fd_check(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    f must map a Node to a scalar Node and be twice differentiable at x.
    Runs in float64 regardless of the input dtype.
    """
    x = np.asarray(x, dtype=np.float64)
    probe = leaf(x.copy(), requires_grad=True, name="fd_probe")
    out = f(probe)
    if np.size(out.value) != 1:
        raise ContractError(f"fd_check target must be scalar, got shape {np.shape(out.value)}")
    if not np.isfinite(out.value).all():
        raise OracleError("fd_check: non-finite function value at base point")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x)

    flat = x.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(constant(x.copy())).value
        flat[i] = orig - h
        fm = f(constant(x.copy())).value
        flat[i] = orig
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise OracleError(f"fd_check: non-finite function value at coordinate {i}")
        numeric[i] = (float(fp) - float(fm)) / (2.0 * h)
    numeric = numeric.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
