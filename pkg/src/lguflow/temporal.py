"""Update operator: a convolutional GRU whose gates receive additive biases
from per-channel B-spline (KAN) heads over the gated previous hidden state.

The KAN realization is the minimal one: per input channel a univariate
function (linear base weight + cubic B-spline on a fixed grid over [-1, 1]),
channel-mixed by a learned matrix. With all KAN parameters zero the operator
reduces exactly to a plain conv-GRU, which is the ablation baseline.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node

GRID_SIZE = 8          # spline intervals over [-1, 1]
SPLINE_ORDER = 3       # cubic
N_COEF = GRID_SIZE + SPLINE_ORDER
_H_CELL = 2.0 / GRID_SIZE


def spline_basis(u: np.ndarray):
    """Active-window uniform cubic B-spline basis at clamped inputs.

    Returns (cols, w, dw, inside): for each element, the four active
    coefficient indices j..j+3, their basis weights, the weight derivatives
    w.r.t. u (zero outside the clamp), and the inside-domain mask.
    """
    uc = np.clip(u, -1.0, 1.0)
    pos = (uc + 1.0) / _H_CELL
    j = np.minimum(pos.astype(np.int64), GRID_SIZE - 1)
    t = pos - j
    t2 = t * t
    t3 = t2 * t
    w = np.stack([
        (1.0 - t) ** 3 / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ], axis=-1)
    dw = np.stack([
        -((1.0 - t) ** 2) / 2.0,
        (9.0 * t2 - 12.0 * t) / 6.0,
        (-9.0 * t2 + 6.0 * t + 3.0) / 6.0,
        t2 / 2.0,
    ], axis=-1) / _H_CELL
    inside = np.abs(u) <= 1.0
    dw *= inside[..., None]
    cols = j[..., None] + np.arange(4)
    return cols, w.astype(u.dtype), dw.astype(u.dtype), inside


def kan_univariate(u: Node, base: Node, coef: Node) -> Node:
    """Per-channel function bank: base_c * u_c + spline_c(clamp(u_c)).

    u: (N, C); base: (C,); coef: (C, N_COEF). The linear base term sees the
    raw input; only the spline argument is clamped to [-1, 1].
    """
    from ._kernels import kan_bwd, kan_fwd

    uv = u.value
    out = np.empty_like(uv)
    kan_fwd(uv, base.value, coef.value, GRID_SIZE, _H_CELL, out)

    def vjp(g):
        g = np.ascontiguousarray(g, dtype=uv.dtype)
        du = np.empty_like(uv)
        dbase = np.zeros_like(base.value)
        dcoef = np.zeros_like(coef.value)
        kan_bwd(uv, base.value, coef.value, GRID_SIZE, _H_CELL, g, du, dbase, dcoef)
        return (du, dbase, dcoef)

    return ad._op(out, (u, base, coef), vjp, "kan_univariate")


def init_kan_params(store, d_h: int, rng: np.random.Generator, dtype=np.float32):
    scale = 1.0 / np.sqrt(d_h)
    store.add("kan.gate_w", (rng.standard_normal((d_h, d_h)) * scale).astype(dtype))
    store.add("kan.gate_b", np.zeros(d_h, dtype=dtype))
    for head in ("z", "r", "o"):
        store.add(f"kan.{head}.base", (0.1 * rng.standard_normal(d_h)).astype(dtype))
        store.add(f"kan.{head}.coef", (0.1 * rng.standard_normal((d_h, N_COEF))).astype(dtype))
        store.add(f"kan.{head}.mix", (0.1 * scale * rng.standard_normal((d_h, d_h))).astype(dtype))


def kan_bias(h_prev: Node, store) -> tuple[Node, Node, Node]:
    """Gate biases from the gated hidden state: three independent spline heads.

    u = sigmoid(1x1 conv(h)) * h stays in (-1, 1) whenever h does, so the
    spline argument never leaves its grid.
    """
    g = ad.sigmoid(ad.add(ad.matmul(h_prev, store["kan.gate_w"]), store["kan.gate_b"]))
    u = ad.mul(g, h_prev)
    heads = ("z", "r", "o")
    phis = _kan3(u, [store[f"kan.{h}.base"] for h in heads],
                 [store[f"kan.{h}.coef"] for h in heads])
    return tuple(ad.matmul(phi, store[f"kan.{h}.mix"]) for phi, h in zip(phis, heads))


def _kan3(u: Node, bases, coefs) -> list[Node]:
    """All three univariate banks in one fused op (they share the input)."""
    from ._kernels import kan3_bwd, kan3_fwd

    uv = u.value
    N, C = uv.shape
    b3 = np.stack([b.value for b in bases])
    c3 = np.stack([c.value for c in coefs])
    out = np.empty((3, N, C), dtype=uv.dtype)
    kan3_fwd(uv, b3, c3, GRID_SIZE, _H_CELL, out)

    stacked = Node(out, (u, *bases, *coefs), None, name="kan3")

    def vjp(g):
        from ._kernels import kan3_bwd_input, kan3_bwd_params

        g = np.ascontiguousarray(g, dtype=uv.dtype)
        du = np.empty_like(uv)
        db3 = np.zeros_like(b3)
        dc3 = np.zeros_like(c3)
        kan3_bwd_input(uv, b3, c3, GRID_SIZE, _H_CELL, g, du)
        kan3_bwd_params(uv, GRID_SIZE, _H_CELL, g, db3, dc3)
        return (du, db3[0], db3[1], db3[2], dc3[0], dc3[1], dc3[2])

    stacked.vjp = vjp
    return [ad.reshape(ad.slice_axis(stacked, 0, h, h + 1), (N, C)) for h in range(3)]


def init_gru_params(store, d_h: int, x_dim: int, rng: np.random.Generator, dtype=np.float32):
    cin = d_h + x_dim
    scale = 1.0 / np.sqrt(9 * cin)
    for gate in ("z", "r", "o"):
        store.add(f"gru.w{gate}", (rng.standard_normal((9, cin, d_h)) * scale).astype(dtype))
        store.add(f"gru.b{gate}", np.zeros(d_h, dtype=dtype))


def gru_step(h_prev: Node, x_t: Node, store, H: int, W: int, kan_biases=None,
             frames: int = 1) -> Node:
    """One gated recurrence step on pixel-major maps.

    h_prev: (HW, D_h) in [-1, 1]; x_t: (HW, X). kan_biases: optional
    (b_z, b_r, b_o) added to the gate pre-activations; None skips the adds
    entirely (the plain conv-GRU baseline).
    """
    d_h = h_prev.value.shape[1]
    # z and r share the same input: one conv with stacked weights, then split
    w_zr = ad.concat([store["gru.wz"], store["gru.wr"]], axis=2)
    b_zr = ad.concat([store["gru.bz"], store["gru.br"]], axis=0)
    zr_pre = ad.conv2d_cat_pm([h_prev, x_t], w_zr, b_zr, H, W, frames=frames)
    z_pre = ad.slice_axis(zr_pre, 1, 0, d_h)
    r_pre = ad.slice_axis(zr_pre, 1, d_h, 2 * d_h)
    if kan_biases is not None:
        z_pre = ad.add(z_pre, kan_biases[0])
        r_pre = ad.add(r_pre, kan_biases[1])
    z = ad.sigmoid(z_pre)
    r = ad.sigmoid(r_pre)
    o_pre = ad.conv2d_cat_pm([ad.mul(r, h_prev), x_t], store["gru.wo"], store["gru.bo"],
                             H, W, frames=frames)
    if kan_biases is not None:
        o_pre = ad.add(o_pre, kan_biases[2])
    o = ad.tanh(o_pre)
    one = ad.constant(1.0, dtype=h_prev.value.dtype)
    return ad.add(ad.mul(ad.sub(one, z), h_prev), ad.mul(z, o))


def init_update_params(store, d_h: int, corr_dim: int, rng: np.random.Generator,
                       dtype=np.float32):
    """Input encoders and flow head around the GRU; widths derived from d_h."""
    c1, c2 = d_h, max(d_h // 2, 4)
    f1, f2 = max(d_h // 2, 4), max(d_h // 4, 4)
    h1 = d_h
    store.add("mot.corr_w1", (rng.standard_normal((corr_dim, c1)) / np.sqrt(corr_dim)).astype(dtype))
    store.add("mot.corr_b1", np.zeros(c1, dtype=dtype))
    store.add("mot.corr_w2", (rng.standard_normal((9, c1, c2)) / np.sqrt(9 * c1)).astype(dtype))
    store.add("mot.corr_b2", np.zeros(c2, dtype=dtype))
    store.add("mot.flow_w1", (rng.standard_normal((49, 2, f1)) / np.sqrt(98)).astype(dtype))
    store.add("mot.flow_b1", np.zeros(f1, dtype=dtype))
    store.add("mot.flow_w2", (rng.standard_normal((9, f1, f2)) / np.sqrt(9 * f1)).astype(dtype))
    store.add("mot.flow_b2", np.zeros(f2, dtype=dtype))
    store.add("head.w1", (rng.standard_normal((9, d_h, h1)) / np.sqrt(9 * d_h)).astype(dtype))
    store.add("head.b1", np.zeros(h1, dtype=dtype))
    store.add("head.w2", (0.1 * rng.standard_normal((9, h1, 2)) / np.sqrt(9 * h1)).astype(dtype))
    store.add("head.b2", np.zeros(2, dtype=dtype))
    return c2 + f2 + d_h  # x_t channel count


def update_operator(h_prev: Node, corr: Node, flow: Node, ctx: Node, store,
                    H: int, W: int, use_kan: bool = True,
                    frames: int = 1) -> tuple[Node, Node]:
    """One refinement iteration: encode inputs, step the GRU, emit a flow delta.

    corr: (HW, 4*(2r+1)^2) lookup tensor; flow: (HW, 2) current estimate
    (its encoder sees it, gradients flow back through it); ctx: (HW, D_h) raw
    context features. Returns (new hidden state, flow delta).
    """
    c = ad.gelu(ad.add(ad.matmul(corr, store["mot.corr_w1"]), store["mot.corr_b1"]))
    c = ad.gelu(ad.conv2d_pm(c, store["mot.corr_w2"], store["mot.corr_b2"], H, W, frames=frames))
    f = ad.gelu(ad.conv2d_pm(flow, store["mot.flow_w1"], store["mot.flow_b1"], H, W, frames=frames))
    f = ad.gelu(ad.conv2d_pm(f, store["mot.flow_w2"], store["mot.flow_b2"], H, W, frames=frames))
    x_t = ad.concat([c, f, ctx], axis=1)
    biases = kan_bias(h_prev, store) if use_kan else None
    h_new = gru_step(h_prev, x_t, store, H, W, kan_biases=biases, frames=frames)
    d1 = ad.gelu(ad.conv2d_pm(h_new, store["head.w1"], store["head.b1"], H, W, frames=frames))
    dflow = ad.conv2d_pm(d1, store["head.w2"], store["head.b2"], H, W, frames=frames)
    return h_new, dflow
