"""Learnable 2D Gaussian uncertainty over correspondence maps.

Per source pixel the model predicts an expectation residual and a diagonal
covariance; the normalized covariance is bounded to (beta, alpha+beta); a
truncated density window re-weights that pixel's correspondence map
multiplicatively. Everything is differentiable; the window anchor uses
stop-gradient rounding so expectation gradients flow through the density
arguments only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .correlation import feature_pm
from .geometry import grid_coords
from .tensor import ShapeError

ALPHA = 5.0
BETA = 0.05
MASK_GAIN = 3.0
NORM_EPS = 1e-5
TWO_PI = 2.0 * np.pi


def trunc_radius(H: int, W: int) -> int:
    """Mask truncation radius in grid cells: round((H+W)/16), at least 1."""
    return max(1, int(round((H + W) / 16.0)))


def init_gaussian_params(store, channels: int, rng: np.random.Generator, dtype=np.float32):
    """Shared per-pixel encoder (2C -> 2C, GeLU) and the two linear heads."""
    twoc = 2 * channels
    scale = 1.0 / np.sqrt(twoc)
    store.add("gauss.enc_w", (rng.standard_normal((twoc, twoc)) * scale).astype(dtype))
    store.add("gauss.enc_b", np.zeros(twoc, dtype=dtype))
    store.add("gauss.mu_w", (rng.standard_normal((twoc, 2)) * scale * 0.1).astype(dtype))
    store.add("gauss.mu_b", np.zeros(2, dtype=dtype))
    store.add("gauss.cov_w", (rng.standard_normal((twoc, 2)) * scale * 0.1).astype(dtype))
    store.add("gauss.cov_b", np.zeros(2, dtype=dtype))


def encode_gaussian_pm(fi_pm, fj_pm, store) -> tuple[Node, Node]:
    """Pixel-major encoder: returns (expectation residual, raw covariance), (HW, 2) each."""
    x = ad.concat([fi_pm, fj_pm], axis=1)
    hidden = ad.gelu(ad.add(ad.matmul(x, store["gauss.enc_w"]), store["gauss.enc_b"]))
    resid = ad.add(ad.matmul(hidden, store["gauss.mu_w"]), store["gauss.mu_b"])
    raw_cov = ad.add(ad.matmul(hidden, store["gauss.cov_w"]), store["gauss.cov_b"])
    return resid, raw_cov


def encode_gaussian(f_i, f_j, store) -> tuple[Node, Node]:
    """(C, H, W) features -> ((H, W, 2) residual, (H, W, 2) raw covariance)."""
    f_i, f_j = ad.lift(f_i), ad.lift(f_j)
    if f_i.value.shape != f_j.value.shape:
        raise ShapeError(f"feature shapes differ: {f_i.value.shape} vs {f_j.value.shape}")
    _, H, W = f_i.value.shape
    resid, raw = encode_gaussian_pm(feature_pm(f_i), feature_pm(f_j), store)
    return ad.reshape(resid, (H, W, 2)), ad.reshape(raw, (H, W, 2))


def normalize_covariance(raw, alpha: float = ALPHA, beta: float = BETA,
                         eps: float = NORM_EPS, frames: int = 1) -> Node:
    """Bound raw covariance predictions to (beta, alpha+beta).

    Per-channel standardization over all spatial positions, then
    alpha * sigmoid(.) + beta. Constant input standardizes to exactly zero
    (eps guard), giving alpha/2 + beta everywhere. Stacked frames normalize
    over their own positions.
    """
    raw = ad.lift(raw)
    shape = raw.value.shape
    flat = ad.reshape(raw, (-1, shape[-1]))
    squashed = ad.sigmoid(ad.standardize_columns(flat, eps=eps, frames=frames))
    out = ad.add(ad.mul(squashed, alpha), ad.constant(beta, dtype=raw.value.dtype))
    return ad.reshape(out, shape)


def density(mu, cov, points) -> Node:
    """Diagonal-covariance 2D Gaussian density, broadcast over query points.

    mu, cov: (..., 2); points: (..., 2) broadcast-compatible. The density is
    normalized: exp(-0.5 sum_d (p_d - mu_d)^2 / cov_d) / (2 pi sqrt(cov_x cov_y)).
    """
    mu, cov, points = ad.lift(mu), ad.lift(cov), ad.lift(points)
    if np.any(cov.value <= 0):
        raise ContractError("covariance entries must be strictly positive")
    ax = mu.value.ndim - 1
    mx, my = ad.slice_axis(mu, ax, 0, 1), ad.slice_axis(mu, ax, 1, 2)
    ex, ey = ad.slice_axis(cov, ax, 0, 1), ad.slice_axis(cov, ax, 1, 2)
    pax = points.value.ndim - 1
    px, py = ad.slice_axis(points, pax, 0, 1), ad.slice_axis(points, pax, 1, 2)
    dx = ad.sub(px, mx)
    dy = ad.sub(py, my)
    expo = ad.mul(ad.add(ad.div(ad.mul(dx, dx), ex), ad.div(ad.mul(dy, dy), ey)), -0.5)
    norm = ad.div(ad.constant(1.0 / TWO_PI, dtype=mu.value.dtype),
                  ad.sqrt(ad.mul(ex, ey)))
    out = ad.mul(ad.exp(expo), norm)
    # drop the kept coordinate axis
    return ad.reshape(out, out.value.shape[:-1])


@dataclass
class GaussianField:
    """Per-pixel 2D Gaussian parameters over the H x W grid (pixel-major)."""

    mu: Node        # (HW, 2) expectation = base grid + residual
    cov: Node       # (HW, 2) diagonal covariance in (beta, alpha+beta)
    base: np.ndarray  # (HW, 2) integer grid coordinates
    H: int
    W: int

    @property
    def anchor(self) -> np.ndarray:
        """round(mu) with stop-gradient: the discrete window center."""
        return np.round(self.mu.value)

    def mask_args(self, gain: float = MASK_GAIN, r1: int | None = None):
        """(mu, cov, gain, r1) tuple consumed by the lookup kernels."""
        if r1 is None:
            r1 = trunc_radius(self.H, self.W)
        return (self.mu, self.cov, float(gain), float(r1))


def gaussian_field(f_i, f_j, store, alpha: float = ALPHA, beta: float = BETA) -> GaussianField:
    """Full prediction chain: encode, normalize, add the base grid."""
    f_i, f_j = ad.lift(f_i), ad.lift(f_j)
    _, H, W = f_i.value.shape
    return gaussian_field_pm(feature_pm(f_i), feature_pm(f_j), store, H, W, alpha, beta)


def gaussian_field_pm(fi_pm, fj_pm, store, H: int, W: int,
                      alpha: float = ALPHA, beta: float = BETA,
                      frames: int = 1) -> GaussianField:
    resid, raw = encode_gaussian_pm(fi_pm, fj_pm, store)
    cov = normalize_covariance(raw, alpha=alpha, beta=beta, frames=frames)
    base = grid_coords(H, W, dtype=resid.value.dtype)
    if frames > 1:
        base = np.tile(base, (frames, 1))
    mu = ad.add(resid, ad.constant(base))
    return GaussianField(mu=mu, cov=cov, base=base, H=H, W=W)


@dataclass
class GaussianMask:
    """Dense truncated mask windows anchored at round(mu)."""

    values: Node          # (HW, (2r1+1)^2) density * gain inside the window
    anchor: np.ndarray    # (HW, 2) integer window centers
    offsets: np.ndarray   # ((2r1+1)^2, 2) integer cell offsets
    r1: int
    H: int
    W: int


def build_mask(field: GaussianField, gain: float = MASK_GAIN, r1: int | None = None) -> GaussianMask:
    """Evaluate gain * density at the integer cells of each truncation window.

    The anchor is round(mu) under stop-gradient; the density arguments stay
    continuous so expectation/covariance gradients flow.
    """
    if r1 is None:
        r1 = trunc_radius(field.H, field.W)
    side = np.arange(-r1, r1 + 1, dtype=np.float64)
    oy, ox = np.meshgrid(side, side, indexing="ij")
    offsets = np.stack([ox.ravel(), oy.ravel()], axis=1)  # (K, 2)
    anchor = field.anchor
    cells = anchor[:, None, :] + offsets[None, :, :]      # (HW, K, 2)
    mu_b = ad.reshape(field.mu, (-1, 1, 2))
    cov_b = ad.reshape(field.cov, (-1, 1, 2))
    vals = ad.mul(density(mu_b, cov_b, ad.constant(cells, dtype=field.mu.value.dtype)), gain)
    return GaussianMask(values=vals, anchor=anchor, offsets=offsets,
                        r1=r1, H=field.H, W=field.W)


def apply_mask(volume, mask: GaussianMask) -> Node:
    """Materialized mask application: C <- C * (1 + M) inside each window.

    volume: (H, W, H, W) node. Cells outside a pixel's Chebyshev-r1 window are
    untouched exactly; window cells falling outside the volume are ignored.
    """
    volume = ad.lift(volume)
    H, W = mask.H, mask.W
    if volume.value.shape != (H, W, H, W):
        raise ShapeError(f"volume shape {volume.value.shape} != {(H, W, H, W)}")
    n = H * W
    K = mask.offsets.shape[0]
    cells = mask.anchor[:, None, :].astype(np.int64) + mask.offsets[None, :, :].astype(np.int64)
    cx, cy = cells[..., 0], cells[..., 1]
    inside = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, K))[inside]
    flat_cells = (cy * W + cx)[inside]
    sel = inside  # boolean (n, K) selecting in-bounds window cells

    vol_pm = ad.reshape(volume, (n, n))

    def fuse(vol_node, vals_node):
        mult = np.ones((n, n), dtype=vol_node.value.dtype)
        mult[rows, flat_cells] += vals_node.value[sel]
        out = vol_node.value * mult

        def vjp(g):
            dvol = g * mult
            dvals = np.zeros_like(vals_node.value)
            dvals[sel] = (g * vol_node.value)[rows, flat_cells]
            return (dvol, dvals)

        return ad._op(out, (vol_node, vals_node), vjp, "apply_mask")

    masked = fuse(vol_pm, mask.values)
    return ad.reshape(masked, (H, W, H, W))
