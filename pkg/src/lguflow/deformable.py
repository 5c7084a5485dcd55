"""Multi-scale deformable sampling: offset decoding, scale composition,
variance-gated filtering, and the final deformable lookup.

Offsets are decoded once per frame pair at full resolution: a top-level field
plus a residual field predicted at half resolution and upsampled. Each pyramid
level uses (top + residual) / 2^level. A per-pixel soft gate, the sigmoid of
the fixed-range tap variance, suppresses offsets where the correlation
neighborhood is uninformative.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .correlation import (
    DEFAULT_RADIUS,
    LEVEL_STRIDES,
    CorrPyramid,
    feature_pm,
    lookup_pm,
    _coords_pm,
)

OFFSET_SCALE = 4.0


def init_offset_params(store, channels: int, rng: np.random.Generator,
                       r: int = DEFAULT_RADIUS, width: int = 32, dtype=np.float32):
    twoc = 2 * channels
    taps2 = 2 * (2 * r + 1) ** 2
    for prefix in ("offset.top", "offset.res"):
        s1 = 1.0 / np.sqrt(9 * twoc)
        store.add(f"{prefix}.w1", (rng.standard_normal((9, twoc, width)) * s1).astype(dtype))
        store.add(f"{prefix}.b1", np.zeros(width, dtype=dtype))
        s2 = 1.0 / np.sqrt(width)
        store.add(f"{prefix}.w2", (rng.standard_normal((width, taps2)) * s2).astype(dtype))
        store.add(f"{prefix}.b2", np.zeros(taps2, dtype=dtype))


def _psi(x: Node, tau: float, frames: int = 1) -> Node:
    """Normalize-then-squash: tau * tanh(standardize(x)); bounds each component to (-tau, tau)."""
    return ad.mul(ad.tanh(ad.standardize_columns(x, frames=frames)), tau)


def _offset_head(x_pm: Node, store, prefix: str, H: int, W: int, frames: int = 1) -> Node:
    h = ad.gelu(ad.conv2d_pm(x_pm, store[f"{prefix}.w1"], store[f"{prefix}.b1"], H, W,
                             frames=frames))
    return ad.add(ad.matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def decode_offsets_pm(fi_pm: Node, fj_pm: Node, store, H: int, W: int,
                      tau: float = OFFSET_SCALE, frames: int = 1) -> tuple[Node, Node]:
    """Top-level and residual offset fields, each (HW, (2r+1)^2, 2) in (-tau, tau).

    The residual head runs at half resolution (k=2 average pooling) and is
    bilinearly upsampled before the normalize/squash, per the decode contract.
    """
    x = ad.concat([fi_pm, fj_pm], axis=1)
    top = _psi(_offset_head(x, store, "offset.top", H, W, frames), tau, frames)

    x_half = ad.avg_pool_pm(x, H, W, 2, frames=frames)
    res_raw = _offset_head(x_half, store, "offset.res", H // 2, W // 2, frames)
    res_full = ad.bilinear_upsample_2x_pm(res_raw, H // 2, W // 2, frames=frames)
    res = _psi(res_full, tau, frames)

    n = frames * H * W
    return ad.reshape(top, (n, -1, 2)), ad.reshape(res, (n, -1, 2))


def decode_offsets(f_i, f_j, store, tau: float = OFFSET_SCALE) -> tuple[Node, Node]:
    """(C, H, W) feature wrapper around decode_offsets_pm."""
    f_i, f_j = ad.lift(f_i), ad.lift(f_j)
    _, H, W = f_i.value.shape
    return decode_offsets_pm(feature_pm(f_i), feature_pm(f_j), store, H, W, tau)


def compose_scale_offsets(top: Node, res: Node, level: int) -> Node:
    """Level offsets: (top + res) / 2^level, level in {0,1,2,3}."""
    if level not in (0, 1, 2, 3):
        raise ValueError(f"level must be in 0..3, got {level}")
    summed = ad.add(top, res)
    if level == 0:
        return summed
    return ad.mul(summed, 1.0 / (2 ** level))


def tap_variance(pyr: CorrPyramid, coords, r: int = DEFAULT_RADIUS, mask=None) -> Node:
    """Per-pixel population variance of fixed-range taps, averaged over levels."""
    coords = _coords_pm(coords)
    taps = lookup_pm(pyr, coords, r, offsets=None, mask=mask)
    n = taps.value.shape[0]
    levels = len(LEVEL_STRIDES)
    cube = ad.reshape(taps, (n, levels, -1))
    mean = ad.reduce_mean(cube, axis=2, keepdims=True)
    centered = ad.sub(cube, mean)
    var = ad.reduce_mean(ad.mul(centered, centered), axis=2)
    return ad.reduce_mean(var, axis=1)


def uncertainty_gate(pyr: CorrPyramid, coords, r: int = DEFAULT_RADIUS,
                     offsets=None, mask=None):
    """Soft mask of Eq-style variance filtering: gate = sigmoid(tap variance).

    Returns (gate, gated_offsets). Zero variance gives exactly sigmoid(0)=0.5;
    the gate grows strictly with the variance. Offsets (a sequence of
    (HW, T, 2) nodes) are each multiplied by the per-pixel gate; pass None to
    get just the gate.
    """
    gate = ad.sigmoid(tap_variance(pyr, coords, r, mask=mask))
    if offsets is None:
        return gate, None
    gate_col = ad.reshape(gate, (-1, 1, 1))
    gated = [ad.mul(ad.lift(o), gate_col) for o in offsets]
    return gate, gated


def deformable_lookup(pyr: CorrPyramid, coords, offsets, r: int = DEFAULT_RADIUS,
                      mask=None) -> Node:
    """Final deformable sampling over the deformed tap set, levels concatenated.

    offsets: per-level sequence of (HW, (2r+1)^2, 2) in level units, or None
    for fixed-range behavior (then bit-identical to lookup_fixed).
    """
    out = lookup_pm(pyr, _coords_pm(coords), r, offsets=offsets, mask=mask)
    return ad.reshape(out, (pyr.H, pyr.W, -1))
