"""End-to-end matching model: feature/context encoders feeding correlation,
uncertainty masking, deformable sampling, and the unrolled update operator.

The encoders are deliberately small generic stacks; the substance lives in
the downstream modules. Initial flow is zero (the zero-motion prior), so the
base-grid expectation anchors the mask on the a-priori correspondence.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import deformable, gaussian, temporal
from .autodiff import Node, ParamStore
from .correlation import DEFAULT_RADIUS, LEVEL_STRIDES, CorrPyramid, lookup_pm
from .geometry import SceneSample, grid_coords


class MatchingModel:
    """Parameter container plus the unrolled forward pass."""

    def __init__(self, H: int = 48, W: int = 64, channels: int = 32, d_h: int = 16,
                 r: int = DEFAULT_RADIUS, alpha: float = gaussian.ALPHA,
                 beta: float = gaussian.BETA, mask_gain: float = gaussian.MASK_GAIN,
                 offset_scale: float = deformable.OFFSET_SCALE,
                 seed: int = 0, dtype=np.float32):
        self.H, self.W, self.channels = H, W, channels
        self.d_h = d_h
        self.r = r
        self.alpha, self.beta = alpha, beta
        self.mask_gain = mask_gain
        self.offset_scale = offset_scale
        self.dtype = np.dtype(dtype)
        self.store = ParamStore(seed)
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x90DE1)))
        self._init_params(rng)
        self.grid = grid_coords(H, W, dtype=self.dtype)

    @classmethod
    def from_config(cls, cfg) -> "MatchingModel":
        return cls(H=cfg.h, W=cfg.w, channels=cfg.c, d_h=cfg.d_h, r=cfg.r,
                   alpha=cfg.alpha, beta=cfg.beta, mask_gain=cfg.mask_scale,
                   offset_scale=cfg.tau_s, seed=cfg.seed, dtype=cfg.numpy_dtype())

    def _init_params(self, rng):
        store, C, d_h, dt = self.store, self.channels, self.d_h, self.dtype
        s3 = 1.0 / np.sqrt(9 * C)
        store.add("enc.w1", (rng.standard_normal((9, C, C)) * s3).astype(dt))
        store.add("enc.b1", np.zeros(C, dtype=dt))
        store.add("enc.w2", (rng.standard_normal((9, C, C)) * s3).astype(dt))
        store.add("enc.b2", np.zeros(C, dtype=dt))
        store.add("ctx.w1", (rng.standard_normal((9, C, d_h)) * s3).astype(dt))
        store.add("ctx.b1", np.zeros(d_h, dtype=dt))
        store.add("ctx.w2", (rng.standard_normal((9, d_h, d_h)) / np.sqrt(9 * d_h)).astype(dt))
        store.add("ctx.b2", np.zeros(d_h, dtype=dt))
        gaussian.init_gaussian_params(store, C, rng, dtype=dt)
        deformable.init_offset_params(store, C, rng, r=self.r,
                                      width=max(d_h, 16), dtype=dt)
        corr_dim = len(LEVEL_STRIDES) * (2 * self.r + 1) ** 2
        x_dim = temporal.init_update_params(store, d_h, corr_dim, rng, dtype=dt)
        temporal.init_gru_params(store, d_h, x_dim, rng, dtype=dt)
        temporal.init_kan_params(store, d_h, rng, dtype=dt)

    # ------------------------------------------------------------------
    def _encode_features(self, img_pm: Node, frames: int) -> Node:
        h = ad.gelu(ad.conv2d_pm(img_pm, self.store["enc.w1"], self.store["enc.b1"],
                                 self.H, self.W, frames=frames))
        return ad.conv2d_pm(h, self.store["enc.w2"], self.store["enc.b2"],
                            self.H, self.W, frames=frames)

    def _encode_context(self, img_pm: Node, frames: int) -> Node:
        h = ad.gelu(ad.conv2d_pm(img_pm, self.store["ctx.w1"], self.store["ctx.b1"],
                                 self.H, self.W, frames=frames))
        return ad.conv2d_pm(h, self.store["ctx.w2"], self.store["ctx.b2"],
                            self.H, self.W, frames=frames)

    def _images_pm(self, samples, which: str) -> Node:
        parts = [getattr(s, which).reshape(self.channels, -1).T for s in samples]
        return ad.constant(np.ascontiguousarray(np.concatenate(parts, axis=0),
                                                dtype=self.dtype))

    def forward(self, sample, iterations: int = 8,
                no_lgu: bool = False, no_deform: bool = False, no_kan: bool = False,
                workspace: bool = False, mode: str = "materialized") -> dict:
        """Run the full pipeline; returns intermediate nodes keyed by name.

        sample: one SceneSample or a list (batched row-stacked processing; the
        samples stay block-independent throughout). flows: per-iteration
        absolute flow estimates, (frames*HW, 2) each. field/gate/offsets are
        None under the corresponding ablations.
        """
        samples = sample if isinstance(sample, (list, tuple)) else [sample]
        B = len(samples)
        H, W = self.H, self.W
        n = B * H * W
        store = self.store
        fi_img = self._images_pm(samples, "f_i")
        fj_img = self._images_pm(samples, "f_j")
        f_i = self._encode_features(fi_img, B)
        f_j = self._encode_features(fj_img, B)
        ctx = self._encode_context(fi_img, B)
        h = ad.tanh(ctx)

        if mode == "materialized":
            pyr = CorrPyramid.from_features_pm(f_i, f_j, H, W, self.channels,
                                               workspace=workspace, frames=B)
        else:
            pyr = CorrPyramid("onthefly", H, W, self.channels, fi_pm=f_i,
                              fjp=[ad.avg_pool_pm(f_j, H, W, s, frames=B)
                                   for s in LEVEL_STRIDES], frames=B)

        field = None
        mask = None
        if not no_lgu:
            field = gaussian.gaussian_field_pm(f_i, f_j, store, H, W,
                                               alpha=self.alpha, beta=self.beta,
                                               frames=B)
            mask = field.mask_args(gain=self.mask_gain)

        grid = self.grid if B == 1 else np.tile(self.grid, (B, 1))
        gate = None
        level_offsets = None
        if not no_deform:
            top, res = deformable.decode_offsets_pm(f_i, f_j, store, H, W,
                                                    tau=self.offset_scale, frames=B)
            init_coords = ad.constant(grid)
            gate, gated = deformable.uncertainty_gate(pyr, init_coords, self.r,
                                                      offsets=(top, res), mask=mask)
            g_top, g_res = gated
            level_offsets = [deformable.compose_scale_offsets(g_top, g_res, lvl)
                             for lvl in range(len(LEVEL_STRIDES))]

        grid_const = ad.constant(grid)
        flow = ad.constant(np.zeros((n, 2), dtype=self.dtype))
        flows = []
        for _ in range(iterations):
            coords = ad.add(grid_const, flow)
            corr = lookup_pm(pyr, coords, self.r, offsets=level_offsets, mask=mask)
            h, dflow = temporal.update_operator(h, corr, flow, ctx, store, H, W,
                                                use_kan=not no_kan, frames=B)
            flow = ad.add(flow, dflow)
            flows.append(flow)

        return {
            "flows": flows,
            "field": field,
            "gate": gate,
            "offsets": level_offsets,
            "pyramid": pyr,
            "context": ctx,
            "features": (f_i, f_j),
            "frames": B,
        }
