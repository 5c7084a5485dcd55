"""Correlation volumes, the 4-level pooled pyramid, and both lookup paths.

The materialized path builds dense volumes (quadratic in pixel count); the
on-the-fly path computes each sampled correlation directly from the feature
maps (linear). On unmasked volumes the two are exactly equivalent because
average pooling commutes with the inner product.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from ._kernels import (
    LUT_RANGE,
    lookup_level_fwd,
    lookup_level_bwd_point,
    lookup_scatter_replay,
    onthefly_level_fwd,
    onthefly_level_bwd,
    workspace_buffer,
)
from .autodiff import IN_PLACE, Node
from .tensor import ShapeError

LEVEL_STRIDES = (1, 2, 4, 8)
DEFAULT_RADIUS = 3


_TAP_CACHE: dict = {}
_EXP_LUT = None
_NO_LUT = np.empty(0, dtype=np.float64)


def _exp_lut(dtype) -> np.ndarray:
    """Interpolation table for the f32 mask-density exp (f64 stays exact)."""
    global _EXP_LUT
    if np.dtype(dtype) != np.float32:
        return _NO_LUT
    if _EXP_LUT is None:
        _EXP_LUT = np.exp(-np.linspace(0.0, LUT_RANGE, 8193))
    return _EXP_LUT


def tap_grid(r: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Integer tap offsets (x, y) of the (2r+1)^2 lookup window, row-major."""
    key = (r, np.dtype(dtype))
    taps = _TAP_CACHE.get(key)
    if taps is None:
        d = np.arange(-r, r + 1, dtype=dtype)
        ty, tx = np.meshgrid(d, d, indexing="ij")
        taps = (np.ascontiguousarray(tx.ravel()), np.ascontiguousarray(ty.ravel()))
        _TAP_CACHE[key] = taps
    return taps


def feature_pm(f) -> Node:
    """(C, H, W) feature node/array -> (H*W, C) pixel-major node."""
    f = ad.lift(f)
    C = f.value.shape[0]
    return ad.transpose(ad.reshape(f, (C, -1)), (1, 0))


def features_from_pm(f_pm: Node, H: int, W: int) -> Node:
    return ad.reshape(ad.transpose(f_pm, (1, 0)), (-1, H, W))


def build_volume(f_i, f_j) -> Node:
    """4D correlation volume: C[u,v,x,y] = <f_i[:,u,v], f_j[:,x,y]> / sqrt(C)."""
    f_i, f_j = ad.lift(f_i), ad.lift(f_j)
    if f_i.value.shape != f_j.value.shape:
        raise ShapeError(f"feature shapes differ: {f_i.value.shape} vs {f_j.value.shape}")
    C, H, W = f_i.value.shape
    vol = corr_matrix(feature_pm(f_i), feature_pm(f_j), C)
    return ad.reshape(vol, (H, W, H, W))


def corr_matrix(fi_pm: Node, fj_pm: Node, channels: int, ws_tag: str | None = None,
                frames: int = 1) -> Node:
    """Scaled inner-product matrix between pixel-major features.

    With stacked frames each sample correlates only against its own target
    frame (block-diagonal across the batch, rows stay sample-aligned).
    """
    scale = 1.0 / np.sqrt(channels)
    n = fi_pm.value.shape[0] // frames
    m = fj_pm.value.shape[0] // frames
    if ws_tag is not None:
        out = workspace_buffer(ws_tag, (frames * n, m), fi_pm.value.dtype)
    else:
        out = np.empty((frames * n, m), dtype=fi_pm.value.dtype)
    for b in range(frames):
        fjT = np.ascontiguousarray(fj_pm.value[b * m:(b + 1) * m].T)
        np.matmul(fi_pm.value[b * n:(b + 1) * n], fjT, out=out[b * n:(b + 1) * n])
    out *= np.asarray(scale, dtype=out.dtype)

    def vjp(g):
        dfi = np.empty_like(fi_pm.value)
        dfj = np.empty_like(fj_pm.value)
        for b in range(frames):
            gs = g[b * n:(b + 1) * n]
            np.matmul(gs, fj_pm.value[b * m:(b + 1) * m], out=dfi[b * n:(b + 1) * n])
            np.matmul(gs.T, fi_pm.value[b * n:(b + 1) * n], out=dfj[b * m:(b + 1) * m])
        s = np.asarray(scale, dtype=g.dtype)
        dfi *= s
        dfj *= s
        return (dfi, dfj)

    return ad._op(out, (fi_pm, fj_pm), vjp, "corr_matrix")


class CorrPyramid:
    """4-level correlation pyramid, materialized or on-the-fly.

    Materialized mode holds one (HW, Hs*Ws) volume node per stride in
    LEVEL_STRIDES. On-the-fly mode holds the pixel-major source features and
    the pooled target features per level.
    """

    def __init__(self, mode, H, W, channels, levels=None, fi_pm=None, fjp=None,
                 frames=1):
        self.mode = mode
        self.H = H
        self.W = W
        self.channels = channels
        self.levels = levels
        self.fi_pm = fi_pm
        self.fjp = fjp
        self.frames = frames

    @property
    def dtype(self):
        if self.mode == "materialized":
            return self.levels[0].value.dtype
        return self.fi_pm.value.dtype

    @classmethod
    def materialized_from_features(cls, f_i, f_j, workspace: bool = False) -> "CorrPyramid":
        """Build each level directly as f_i against pooled f_j.

        Exact (to rounding) by pooling linearity, and avoids materializing and
        re-pooling the full 4D volume.
        """
        f_i, f_j = ad.lift(f_i), ad.lift(f_j)
        C, H, W = f_i.value.shape
        return cls.from_features_pm(feature_pm(f_i), feature_pm(f_j), H, W, C, workspace)

    @classmethod
    def from_features_pm(cls, fi_pm: Node, fj_pm: Node, H: int, W: int, C: int,
                         workspace: bool = False, frames: int = 1) -> "CorrPyramid":
        levels = []
        for idx, s in enumerate(LEVEL_STRIDES):
            fjp = ad.avg_pool_pm(fj_pm, H, W, s, frames=frames)
            tag = f"corr_l{idx}" if workspace else None
            vol = corr_matrix(fi_pm, fjp, C, ws_tag=tag, frames=frames)
            if workspace:
                gbuf = workspace_buffer(f"corr_l{idx}_grad", vol.value.shape, vol.value.dtype)
                gbuf.fill(0.0)
                vol.grad = gbuf
            levels.append(vol)
        return cls("materialized", H, W, C, levels=levels, frames=frames)

    @classmethod
    def materialized_from_volume(cls, volume, channels=None) -> "CorrPyramid":
        """Pyramid by pooling an existing (H, W, H, W) volume over its target dims.

        This is the route for masked volumes, where pooling must happen after
        the mask is applied.
        """
        volume = ad.lift(volume)
        H, W = volume.value.shape[0], volume.value.shape[1]
        if volume.value.shape != (H, W, H, W):
            raise ShapeError(f"expected (H,W,H,W) volume, got {volume.value.shape}")
        flat = ad.reshape(volume, (H * W, H, W))
        levels = []
        for s in LEVEL_STRIDES:
            pooled = ad.avg_pool2d(flat, s)
            levels.append(ad.reshape(pooled, (H * W, (H // s) * (W // s))))
        return cls("materialized", H, W, channels, levels=levels)

    @classmethod
    def onthefly(cls, f_i, f_j) -> "CorrPyramid":
        f_i, f_j = ad.lift(f_i), ad.lift(f_j)
        C, H, W = f_i.value.shape
        fi_pm = feature_pm(f_i)
        fj_pm = feature_pm(f_j)
        fjp = [ad.avg_pool_pm(fj_pm, H, W, s) for s in LEVEL_STRIDES]
        return cls("onthefly", H, W, C, fi_pm=fi_pm, fjp=fjp)


def _dummy_mask_arrays(n: int, dtype):
    z = np.zeros(n, dtype=dtype)
    return z, z, np.ones(n, dtype=dtype), np.ones(n, dtype=dtype), z, z


def _node_xy(node: Node, dtype):
    """Memoized contiguous x/y column split of an (N, 2) or (N, T, 2) node."""
    if node.cache is None:
        node.cache = {}
    key = ("xy_pm", np.dtype(dtype))
    hit = node.cache.get(key)
    if hit is None:
        v = node.value
        hit = (np.ascontiguousarray(v[..., 0], dtype=dtype),
               np.ascontiguousarray(v[..., 1], dtype=dtype))
        node.cache[key] = hit
    return hit


def _flush_scatter(vol_node: Node, Hs, Ws, tx, ty):
    """Replay every recorded lookup of this level into the volume gradient.

    Records carry gradients pre-multiplied by the mask factor, so the replay
    is pure bilinear placement, batched row-hot across all iterations.
    """
    records = vol_node.cache.pop("scatter_records")
    dvol = vol_node.ensure_grad()
    K = len(records)
    n = records[0][1].shape[0]
    T = tx.size
    dtype = dvol.dtype

    def stacked(idx, shape):
        out = np.empty((K,) + shape, dtype=dtype)
        for i, rec in enumerate(records):
            out[i] = rec[idx]
        return out

    gvs = stacked(0, (n, T))
    cxs = stacked(1, (n,))
    cys = stacked(2, (n,))
    offxs = np.zeros((K, 1, 1), dtype=dtype)
    offys = offxs
    if any(rec[3] is not None for rec in records):
        offxs = np.zeros((K, n, T), dtype=dtype)
        offys = np.zeros((K, n, T), dtype=dtype)
        for i, rec in enumerate(records):
            if rec[3] is not None:
                offxs[i] = rec[3]
                offys[i] = rec[4]
    has_offs = np.array([0 if rec[3] is None else 1 for rec in records], dtype=np.int64)
    lookup_scatter_replay(Hs, Ws, tx, ty, cxs, cys, offxs, offys, has_offs,
                          gvs, dvol)


def _level_lookup_node(pyr: CorrPyramid, level_idx: int, coords: Node, r: int,
                       offsets: Node | None, mask) -> Node:
    """One pyramid level's lookup as a fused tape op. Returns (HW, (2r+1)^2)."""
    stride = LEVEL_STRIDES[level_idx]
    H, W = pyr.H, pyr.W
    Hs, Ws = H // stride, W // stride
    n = coords.value.shape[0]
    dtype = pyr.dtype
    tx, ty = tap_grid(r, dtype)
    T = tx.size

    inv_s = np.asarray(1.0 / stride, dtype=dtype)
    cx = np.ascontiguousarray(coords.value[:, 0] * inv_s, dtype=dtype)
    cy = np.ascontiguousarray(coords.value[:, 1] * inv_s, dtype=dtype)

    if offsets is not None:
        offx, offy = _node_xy(offsets, dtype)
        has_off = 1
    else:
        offx = np.zeros((1, 1), dtype=dtype)
        offy = offx
        has_off = 0

    if mask is not None:
        mu_node, cov_node, gain, r1 = mask
        mux, muy = _node_xy(mu_node, dtype)
        ecx, ecy = _node_xy(cov_node, dtype)
        anchor_key = ("anchor", np.dtype(dtype))
        if anchor_key not in mu_node.cache:
            mu_node.cache[anchor_key] = (np.round(mux), np.round(muy))
        ax, ay = mu_node.cache[anchor_key]
        use_mask = 1
    else:
        mux, muy, ecx, ecy, ax, ay = _dummy_mask_arrays(n, dtype)
        gain, r1 = 0.0, 0.0
        use_mask = 0

    parents = [coords]
    if offsets is not None:
        parents.append(offsets)
    if mask is not None:
        parents.extend([mask[0], mask[1]])
    if pyr.mode == "materialized":
        parents.append(pyr.levels[level_idx])
    else:
        parents.extend([pyr.fi_pm, pyr.fjp[level_idx]])
    parents = tuple(parents)
    needs_grad = any(p.requires_grad for p in parents)

    out = np.empty((n, T), dtype=dtype)
    aux = np.empty((n, T, 4), dtype=dtype) if needs_grad else np.empty((1, 1, 4), dtype=dtype)
    if pyr.mode == "materialized":
        vol = pyr.levels[level_idx]
        lookup_level_fwd(vol.value, Hs, Ws, cx, cy, tx, ty, offx, offy, has_off,
                         mux, muy, ecx, ecy, ax, ay, float(r1), float(gain),
                         float(stride), use_mask, _exp_lut(dtype), out, aux,
                         1 if needs_grad else 0)
    else:
        fi = pyr.fi_pm
        fjp = pyr.fjp[level_idx]
        inv_sqrt_c = 1.0 / np.sqrt(pyr.channels)
        onthefly_level_fwd(fi.value, fjp.value, Hs, Ws, cx, cy, tx, ty, offx, offy,
                           has_off, mux, muy, ecx, ecy, ax, ay, float(r1),
                           float(gain), float(stride), use_mask, inv_sqrt_c, out)

    def vjp(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dcx = np.zeros(n, dtype=dtype)
        dcy = np.zeros(n, dtype=dtype)
        doffx = np.zeros_like(offx)
        doffy = np.zeros_like(offy)
        dmux = np.zeros(n, dtype=dtype)
        dmuy = np.zeros(n, dtype=dtype)
        decx = np.zeros(n, dtype=dtype)
        decy = np.zeros(n, dtype=dtype)
        if pyr.mode == "materialized":
            vol_node = pyr.levels[level_idx]
            save_gv = 1 if vol_node.requires_grad else 0
            gv = np.empty_like(g) if save_gv else np.empty((1, 1), dtype=dtype)
            lookup_level_bwd_point(aux, cx, cy, tx, ty, offx, offy, has_off,
                                   mux, muy, ecx, ecy, ax, ay, float(r1),
                                   float(gain), float(stride), use_mask,
                                   g, dcx, dcy, doffx, doffy, dmux, dmuy,
                                   decx, decy, gv, save_gv)
            if vol_node.requires_grad:
                if vol_node.cache is None:
                    vol_node.cache = {}
                records = vol_node.cache.setdefault("scatter_records", [])
                records.append((gv, cx, cy,
                                offx if has_off else None,
                                offy if has_off else None))
                vol_node.pending = lambda: _flush_scatter(vol_node, Hs, Ws, tx, ty)
            tail = [IN_PLACE]
        else:
            fi_node, fjp_node = pyr.fi_pm, pyr.fjp[level_idx]
            dfi = fi_node.ensure_grad()
            dfjp = fjp_node.ensure_grad()
            inv_sqrt_c = 1.0 / np.sqrt(pyr.channels)
            onthefly_level_bwd(fi_node.value, fjp_node.value, Hs, Ws, cx, cy, tx, ty,
                               offx, offy, has_off, mux, muy, ecx, ecy, ax, ay,
                               float(r1), float(gain), float(stride), use_mask,
                               inv_sqrt_c, g, dfi, dfjp, dcx, dcy, doffx, doffy,
                               dmux, dmuy, decx, decy)
            tail = [IN_PLACE, IN_PLACE]
        dcoords = np.stack([dcx * inv_s, dcy * inv_s], axis=1)
        grads = [dcoords]
        if offsets is not None:
            grads.append(np.stack([doffx, doffy], axis=2))
        if mask is not None:
            grads.append(np.stack([dmux, dmuy], axis=1))
            grads.append(np.stack([decx, decy], axis=1))
        grads.extend(tail)
        return tuple(grads)

    return ad._op(out, parents, vjp, f"lookup_l{level_idx}")


def lookup_pm(pyr: CorrPyramid, coords, r: int, offsets=None, mask=None) -> Node:
    """All-level lookup on pixel-major coords (HW, 2). Returns (HW, 4*(2r+1)^2).

    offsets: None or a per-level sequence of (HW, (2r+1)^2, 2) nodes in that
    level's units. mask: None or (mu, cov, gain, r1) with mu/cov (HW, 2) nodes
    in level-1 pixel units.
    """
    coords = ad.lift(coords)
    if offsets is not None and len(offsets) != len(LEVEL_STRIDES):
        raise ShapeError(f"need {len(LEVEL_STRIDES)} offset fields, got {len(offsets)}")
    if mask is not None:
        mu, cov, gain, r1 = mask
        mask = (ad.lift(mu), ad.lift(cov), gain, r1)
    parts = []
    for idx in range(len(LEVEL_STRIDES)):
        off = ad.lift(offsets[idx]) if offsets is not None else None
        parts.append(_level_lookup_node(pyr, idx, coords, r, off, mask))
    return ad.concat(parts, axis=1)


def _coords_pm(coords) -> Node:
    coords = ad.lift(coords)
    if coords.value.ndim == 3:
        coords = ad.reshape(coords, (-1, 2))
    return coords


def lookup_fixed(pyr: CorrPyramid, coords, r: int = DEFAULT_RADIUS, mask=None) -> Node:
    """Fixed-range lookup: (2r+1)^2 taps per level at coords/stride, concatenated.

    coords: (H, W, 2) or (HW, 2). Returns (H, W, 4*(2r+1)^2).
    """
    out = lookup_pm(pyr, _coords_pm(coords), r, offsets=None, mask=mask)
    return ad.reshape(out, (pyr.H, pyr.W, -1))


def lookup_onthefly(f_i, f_j, coords, offsets=None, r: int = DEFAULT_RADIUS, mask=None) -> Node:
    """On-the-fly lookup straight from the feature maps (linear complexity)."""
    pyr = CorrPyramid.onthefly(f_i, f_j)
    off_nodes = None
    if offsets is not None:
        off_nodes = [ad.lift(o) for o in offsets]
    out = lookup_pm(pyr, _coords_pm(coords), r, offsets=off_nodes, mask=mask)
    return ad.reshape(out, (pyr.H, pyr.W, -1))


# ---------------------------------------------------------------------------
# cost accounting and wall-clock benchmarking
# ---------------------------------------------------------------------------

def mac_estimate(path: str, H: int, W: int, C: int, r: int) -> int:
    """Arithmetic cost of one correlation construction, in multiply-accumulates.

    materialized: C * (H*W)^2 for the volume build; onthefly: C * H*W * (2r+1)^2
    per level of sampling.
    """
    hw = H * W
    if path == "materialized":
        return int(C) * hw * hw
    if path == "onthefly":
        return int(C) * hw * (2 * r + 1) ** 2
    raise ValueError(f"unknown path {path!r}")


def identity_coords(H: int, W: int, dtype=np.float64) -> np.ndarray:
    """(H*W, 2) grid of (x, y) pixel coordinates."""
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def bench_path(path: str, H: int, W: int, C: int, r: int, repeat: int,
               seed: int = 0, dtype=np.float32) -> dict:
    """Median wall-clock of one correlation-construction + lookup pass."""
    rng = np.random.default_rng(seed)
    f_i = rng.standard_normal((C, H, W)).astype(dtype)
    f_j = rng.standard_normal((C, H, W)).astype(dtype)
    coords = identity_coords(H, W, dtype)
    coords += rng.uniform(-1.0, 1.0, coords.shape).astype(dtype)

    if path == "materialized":
        def run():
            vol = build_volume(ad.constant(f_i), ad.constant(f_j))
            pyr = CorrPyramid.materialized_from_volume(vol, channels=C)
            return lookup_pm(pyr, ad.constant(coords), r)
    elif path == "onthefly":
        def run():
            pyr = CorrPyramid.onthefly(ad.constant(f_i), ad.constant(f_j))
            return lookup_pm(pyr, ad.constant(coords), r)
    else:
        raise ValueError(f"unknown path {path!r}")

    run()  # warmup (JIT + page cache)
    times = sorted(_time_once(run) for _ in range(repeat))
    median = times[len(times) // 2] if repeat % 2 else 0.5 * (times[repeat // 2 - 1] + times[repeat // 2])
    return {
        "path": path,
        "H": H,
        "W": W,
        "C": C,
        "r": r,
        "repeat": repeat,
        "median_ms": float(median),
        "mac_estimate": mac_estimate(path, H, W, C, r),
    }


def path_difference(H: int, W: int, C: int, r: int, seed: int = 0,
                    with_offsets: bool = False) -> float:
    """Max |materialized - onthefly| over a random f64 instance (unmasked)."""
    rng = np.random.default_rng(seed)
    f_i = rng.standard_normal((C, H, W))
    f_j = rng.standard_normal((C, H, W))
    coords = identity_coords(H, W) + rng.uniform(-2, 2, (H * W, 2))
    offsets = None
    if with_offsets:
        T = (2 * r + 1) ** 2
        offsets = [rng.uniform(-1.5, 1.5, (H * W, T, 2)) for _ in LEVEL_STRIDES]
    vol = build_volume(ad.constant(f_i), ad.constant(f_j))
    pyr_m = CorrPyramid.materialized_from_volume(vol, channels=C)
    pyr_o = CorrPyramid.onthefly(ad.constant(f_i), ad.constant(f_j))
    off_nodes = [ad.constant(o) for o in offsets] if offsets is not None else None
    out_m = lookup_pm(pyr_m, ad.constant(coords), r, offsets=off_nodes)
    out_o = lookup_pm(pyr_o, ad.constant(coords), r, offsets=off_nodes)
    return float(np.max(np.abs(out_m.value - out_o.value)))
