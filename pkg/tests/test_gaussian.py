"""Learnable Gaussian uncertainty: encoder, normalization, density, masks."""

import numpy as np
import pytest

from lguflow import autodiff as ad
from lguflow.autodiff import ContractError
from lguflow.correlation import CorrPyramid, identity_coords, lookup_pm
from lguflow.gaussian import (
    ALPHA,
    BETA,
    GaussianField,
    apply_mask,
    build_mask,
    density,
    encode_gaussian,
    gaussian_field,
    init_gaussian_params,
    normalize_covariance,
    trunc_radius,
)
from lguflow.geometry import grid_coords

from conftest import make_rng
from oracles import density_scalar, per_pixel_mlp, riemann_mass


def tiny_store(seed, C=3):
    store = ad.ParamStore(seed)
    init_gaussian_params(store, C, make_rng(seed + 100), dtype=np.float64)
    return store


class TestEncoder:
    def test_zero_params_zero_outputs(self):
        C, H, W = 3, 4, 4
        store = ad.ParamStore(0)
        for name in ("enc_w", "mu_w", "cov_w"):
            dim_out = 2 * C if name == "enc_w" else 2
            store.add(f"gauss.{name}", np.zeros((2 * C, dim_out)))
        for name in ("enc_b", "mu_b", "cov_b"):
            dim = 2 * C if name == "enc_b" else 2
            store.add(f"gauss.{name}", np.zeros(dim))
        rng = make_rng(1)
        resid, raw = encode_gaussian(ad.constant(rng.standard_normal((C, H, W))),
                                     ad.constant(rng.standard_normal((C, H, W))),
                                     store)
        assert np.array_equal(resid.value, np.zeros((H, W, 2)))
        assert np.array_equal(raw.value, np.zeros((H, W, 2)))

    def test_pointwise_map_identical_pixels(self):
        C, H, W = 3, 2, 2
        store = tiny_store(2, C)
        f_i = np.ones((C, H, W)) * 0.3
        f_j = np.ones((C, H, W)) * -0.7
        resid, raw = encode_gaussian(ad.constant(f_i), ad.constant(f_j), store)
        flat_r = resid.value.reshape(-1, 2)
        flat_c = raw.value.reshape(-1, 2)
        assert np.allclose(flat_r, flat_r[0], atol=1e-14)
        assert np.allclose(flat_c, flat_c[0], atol=1e-14)

    def test_matches_per_pixel_dense_oracle(self):
        C, H, W = 3, 3, 3
        store = tiny_store(13, C)
        rng = make_rng(13)
        f_i = rng.standard_normal((C, H, W))
        f_j = rng.standard_normal((C, H, W))
        resid, raw = encode_gaussian(ad.constant(f_i), ad.constant(f_j), store)
        y, x = 1, 2
        concat = list(f_i[:, y, x]) + list(f_j[:, y, x])
        mu_exp = per_pixel_mlp(concat, store["gauss.enc_w"].value, store["gauss.enc_b"].value,
                               store["gauss.mu_w"].value, store["gauss.mu_b"].value)
        cov_exp = per_pixel_mlp(concat, store["gauss.enc_w"].value, store["gauss.enc_b"].value,
                                store["gauss.cov_w"].value, store["gauss.cov_b"].value)
        assert np.allclose(resid.value[y, x], mu_exp, rtol=1e-10)
        assert np.allclose(raw.value[y, x], cov_exp, rtol=1e-10)


class TestNormalizeCovariance:
    def test_constant_input_gives_alpha_half_plus_beta(self):
        raw = ad.constant(np.full((30, 2), 3.7))
        out = normalize_covariance(raw).value
        assert np.all(out == ALPHA * 0.5 + BETA)

    def test_bounds_hold_for_wild_inputs(self):
        rng = make_rng(3)
        raw = ad.constant(rng.standard_normal((500, 2)) * 1e4)
        out = normalize_covariance(raw).value
        assert out.min() > BETA and out.max() < ALPHA + BETA

    def test_standardized_moments(self):
        rng = make_rng(17)
        raw = rng.standard_normal((4000, 2))
        z = ad.standardize_columns(ad.constant(raw)).value
        # recompute the moments independently
        assert abs(z.mean()) <= 1e-6
        assert abs(np.mean(z[:, 0] ** 2) - 1.0) <= 1e-3
        assert abs(np.mean(z[:, 1] ** 2) - 1.0) <= 1e-3


class TestDensity:
    def test_unit_peak(self):
        mu = ad.constant(np.zeros((1, 2)))
        cov = ad.constant(np.ones((1, 2)))
        val = density(mu, cov, ad.constant(np.zeros((1, 2)))).value[0]
        assert val == pytest.approx(1.0 / (2 * np.pi), rel=1e-12)

    def test_anisotropic_peak(self):
        a, b = 2.3, 0.4
        mu = ad.constant(np.array([[1.0, -2.0]]))
        cov = ad.constant(np.array([[a, b]]))
        val = density(mu, cov, mu).value[0]
        assert val == pytest.approx(1.0 / (2 * np.pi * np.sqrt(a * b)), rel=1e-12)

    def test_riemann_mass_one(self):
        rng = make_rng(5)
        for _ in range(5):
            mu = rng.uniform(-3, 3, 2)
            cov = rng.uniform(0.2, 4.0, 2)
            assert riemann_mass(mu, cov) == pytest.approx(1.0, abs=1e-3)

    def test_matches_scalar_oracle(self):
        rng = make_rng(6)
        mu = rng.standard_normal((8, 2))
        cov = rng.uniform(0.3, 3.0, (8, 2))
        pts = mu + rng.uniform(-2, 2, (8, 2))
        got = density(ad.constant(mu), ad.constant(cov), ad.constant(pts)).value
        for i in range(8):
            assert got[i] == pytest.approx(density_scalar(mu[i], cov[i], pts[i]), rel=1e-12)

    def test_nonpositive_cov_rejected(self):
        with pytest.raises(ContractError):
            density(ad.constant(np.zeros((1, 2))), ad.constant(np.array([[1.0, -0.1]])),
                    ad.constant(np.zeros((1, 2))))

    def test_covariance_sensitivity_sign(self):
        """dF/d(cov_d) > 0 exactly when the squared offset exceeds cov_d."""
        rng = make_rng(7)
        for _ in range(40):
            mu = np.zeros(2)
            cov = rng.uniform(0.3, 3.0, 2)
            p = rng.uniform(-3, 3, 2)
            h = 1e-6
            for d in range(2):
                cp, cm = cov.copy(), cov.copy()
                cp[d] += h
                cm[d] -= h
                deriv = (density_scalar(mu, cp, p) - density_scalar(mu, cm, p)) / (2 * h)
                expect_pos = p[d] ** 2 > cov[d]
                if abs(p[d] ** 2 - cov[d]) > 1e-3:
                    assert (deriv > 0) == expect_pos


class TestMask:
    def test_trunc_radius_rule(self):
        assert trunc_radius(48, 64) == 7
        assert trunc_radius(8, 8) == 1

    def test_center_value_equals_gain_times_unit_peak(self):
        H = W = 8
        base = grid_coords(H, W)
        field = GaussianField(mu=ad.constant(base.copy()),
                              cov=ad.constant(np.ones((H * W, 2))),
                              base=base, H=H, W=W)
        mask = build_mask(field, gain=3.0, r1=3)
        center = mask.offsets.shape[0] // 2
        assert np.allclose(mask.values.value[:, center], 3.0 / (2 * np.pi), rtol=1e-12)

    def test_window_sum_close_to_gain(self):
        H = W = 16
        base = grid_coords(H, W)
        field = GaussianField(mu=ad.constant(base.copy()),
                              cov=ad.constant(np.ones((H * W, 2))),
                              base=base, H=H, W=W)
        mask = build_mask(field, gain=3.0, r1=7)
        sums = mask.values.value.sum(axis=1)
        assert np.allclose(sums, 3.0, atol=3e-3)

    def test_peak_at_nearest_cell(self):
        rng = make_rng(8)
        H = W = 8
        base = grid_coords(H, W)
        mu = base + rng.uniform(-0.45, 0.45, base.shape)
        field = GaussianField(mu=ad.constant(mu), cov=ad.constant(rng.uniform(0.5, 2.0, (H * W, 2))),
                              base=base, H=H, W=W)
        mask = build_mask(field, r1=2)
        cells = mask.anchor[:, None, :] + mask.offsets[None]
        for p in range(0, H * W, 5):
            k = np.argmax(mask.values.value[p])
            best = cells[p, k]
            dist = np.abs(cells[p] - mu[p]).max(axis=1)
            assert np.abs(best - mu[p]).max() == dist.min()


class TestApplyMask:
    def _setup(self, seed, H=8, W=8):
        rng = make_rng(seed)
        vol = rng.standard_normal((H, W, H, W))
        base = grid_coords(H, W)
        mu = base + rng.uniform(-0.4, 0.4, base.shape)
        cov = rng.uniform(0.3, 2.0, (H * W, 2))
        field = GaussianField(mu=ad.constant(mu), cov=ad.constant(cov), base=base, H=H, W=W)
        return vol, field

    def test_zero_mask_leaves_volume(self):
        vol, field = self._setup(1)
        mask = build_mask(field, gain=0.0, r1=2)
        out = apply_mask(ad.constant(vol), mask)
        assert np.array_equal(out.value, vol)

    def test_cell_scaling_definition(self):
        vol, field = self._setup(2)
        mask = build_mask(field, gain=3.0, r1=2)
        out = apply_mask(ad.constant(vol), mask).value
        H = W = 8
        p = 27
        u, v = divmod(p, W)
        cells = (mask.anchor[p][None] + mask.offsets).astype(int)
        vals = mask.values.value[p]
        for (cx, cy), m in zip(cells, vals):
            if 0 <= cx < W and 0 <= cy < H:
                assert out[u, v, cy, cx] == pytest.approx(vol[u, v, cy, cx] * (1 + m), rel=1e-12)

    def test_untouched_outside_chebyshev_window(self):
        vol, field = self._setup(3)
        r1 = 2
        mask = build_mask(field, gain=3.0, r1=r1)
        out = apply_mask(ad.constant(vol), mask).value
        H = W = 8
        anchor = mask.anchor
        for p in (0, 13, 45, 63):
            u, v = divmod(p, W)
            for y in range(H):
                for x in range(W):
                    if max(abs(x - anchor[p, 0]), abs(y - anchor[p, 1])) > r1:
                        assert out[u, v, y, x] == vol[u, v, y, x]

    def test_masked_lookup_equivalence_at_integer_coords(self):
        """Dense-masked materialized lookup == continuous-masked lookup at
        integer sample coordinates (level 1)."""
        rng = make_rng(4)
        H = W = 8
        C = 3
        f_i = rng.standard_normal((C, H, W))
        f_j = rng.standard_normal((C, H, W))
        base = grid_coords(H, W)
        mu = base + rng.uniform(-0.4, 0.4, base.shape)
        cov = rng.uniform(0.3, 2.0, (H * W, 2))
        field = GaussianField(mu=ad.constant(mu), cov=ad.constant(cov), base=base, H=H, W=W)
        gain, r1 = 3.0, 3

        # integer coords: every level-1 tap lands exactly on a cell
        coords = base.copy()
        from lguflow.correlation import build_volume, _level_lookup_node

        vol = build_volume(ad.constant(f_i), ad.constant(f_j))
        masked_vol = apply_mask(vol, build_mask(field, gain=gain, r1=r1))
        pyr_dense = CorrPyramid.materialized_from_volume(masked_vol, channels=C)
        dense = _level_lookup_node(pyr_dense, 0, ad.constant(coords), 1, None, None)

        pyr_plain = CorrPyramid.materialized_from_features(ad.constant(f_i), ad.constant(f_j))
        cont = _level_lookup_node(pyr_plain, 0, ad.constant(coords), 1, None,
                                  (field.mu, field.cov, gain, float(r1)))
        assert np.abs(dense.value - cont.value).max() <= 1e-10

    def test_full_field_zero_motion_peak_alignment(self):
        """With zero residual and zero motion the mask peaks at the
        ground-truth correspondence cell."""
        H = W = 8
        store = tiny_store(5, C=3)
        for name in ("gauss.mu_w", "gauss.mu_b"):
            store[name].value[:] = 0.0
        rng = make_rng(5)
        f = rng.standard_normal((3, H, W))
        field = gaussian_field(ad.constant(f), ad.constant(f), store)
        # zero camera motion: P_ij equals the grid
        gt = grid_coords(H, W)
        assert np.array_equal(field.mu.value, gt)
        mask = build_mask(field, r1=2)
        center = mask.offsets.shape[0] // 2
        peaks = mask.values.value.argmax(axis=1)
        assert np.all(peaks == center)
