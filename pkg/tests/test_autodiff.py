"""Tape mechanics: backward contracts, determinism, fd oracle, optimizer."""

import numpy as np
import pytest

from lguflow import autodiff as ad
from lguflow.autodiff import (
    Adam,
    ContractError,
    OracleError,
    ParamStore,
    backward,
    clip_global_norm,
    fd_check,
)


class TestBackwardContracts:
    def test_sum_gives_ones(self):
        p = ad.leaf(np.array([1.0, 2.0, 3.0]))
        backward(ad.reduce_sum(p))
        assert np.array_equal(p.grad, np.ones(3))

    def test_elementwise_square(self):
        p = ad.leaf(np.array([1.0, 2.0, 3.0]))
        backward(ad.reduce_sum(ad.mul(p, p)))
        assert np.allclose(p.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_raises(self):
        p = ad.leaf(np.array([1.0, 2.0]))
        with pytest.raises(ContractError):
            backward(ad.mul(p, 2.0))

    def test_unreachable_parameter_stays_zero(self):
        store = ParamStore(0)
        used = store.add("used", np.array([1.0, 2.0]))
        idle = store.add("idle", np.array([3.0]))
        store.zero_grad()
        backward(ad.reduce_sum(ad.mul(used, used)))
        assert np.array_equal(idle.grad, np.zeros(1))
        assert np.allclose(used.grad, [2.0, 4.0])

    def test_two_backwards_accumulate_identically(self, rng):
        p = ad.leaf(rng.standard_normal(6))
        loss = ad.reduce_sum(ad.mul(ad.tanh(p), p))
        backward(loss)
        first = p.grad.copy()
        backward(loss)
        second = p.grad - first
        assert np.array_equal(second, first)

    def test_gradient_linearity(self, rng):
        # disjoint additive losses over a shared parameter: grads add exactly
        a = rng.standard_normal(5)
        b = rng.standard_normal(5)
        p1 = ad.leaf(np.ones(5))
        backward(ad.add(ad.reduce_sum(ad.mul(p1, ad.constant(a))),
                        ad.reduce_sum(ad.mul(p1, ad.constant(b)))))
        p2 = ad.leaf(np.ones(5))
        backward(ad.reduce_sum(ad.mul(p2, ad.constant(a))))
        g_first = p2.grad.copy()
        p2.grad = None
        backward(ad.reduce_sum(ad.mul(p2, ad.constant(b))))
        assert np.array_equal(p1.grad, g_first + p2.grad)

    def test_stop_gradient_blocks(self):
        p = ad.leaf(np.array([2.0]))
        loss = ad.reduce_sum(ad.mul(ad.stop_gradient(p), p))
        backward(loss)
        assert np.allclose(p.grad, [2.0])  # only the live branch contributes

    def test_broadcast_grads_fold_back(self, rng):
        col = ad.leaf(rng.standard_normal((4, 1)))
        mat = ad.constant(rng.standard_normal((4, 6)))
        backward(ad.reduce_sum(ad.mul(col, mat)))
        assert col.grad.shape == (4, 1)
        assert np.allclose(col.grad[:, 0], mat.value.sum(axis=1), rtol=1e-12)


class TestFdOracle:
    def test_quadratic_below_1e9(self, rng):
        err = fd_check(lambda p: ad.reduce_sum(ad.mul(p, p)), rng.standard_normal(12))
        assert err <= 1e-9

    def test_nonfinite_function_raises(self):
        def f(p):
            return ad.reduce_sum(ad.log(p))  # log of negatives -> nan

        with pytest.raises((OracleError, Exception)):
            fd_check(f, np.array([-1.0, 0.5]))

    def test_transcendental_chain(self, rng):
        w = rng.standard_normal(10)

        def f(p):
            return ad.reduce_sum(ad.mul(ad.gelu(ad.tanh(p)), ad.constant(w)))

        assert fd_check(f, rng.standard_normal(10)) <= 1e-7


class TestParamStoreCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        store = ParamStore(seed=42)
        store.add("a.w", rng.standard_normal((3, 4)).astype(np.float32))
        store.add("b.w", rng.standard_normal(5).astype(np.float32))
        store.save_checkpoint(tmp_path / "ck", step=17)
        other = ParamStore(seed=0)
        other.add("a.w", np.zeros((3, 4), dtype=np.float32))
        other.add("b.w", np.zeros(5, dtype=np.float32))
        step = other.load_checkpoint(tmp_path / "ck")
        assert step == 17
        assert other.seed == 42
        assert np.array_equal(other["a.w"].value, store["a.w"].value)

    def test_manifest_records_names(self, rng, tmp_path):
        import json

        store = ParamStore(seed=1)
        store.add("x", rng.standard_normal(2))
        store.save_checkpoint(tmp_path / "ck", step=3)
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["step"] == 3 and "x" in manifest["params"]

    def test_duplicate_name_rejected(self):
        store = ParamStore(0)
        store.add("p", np.zeros(1))
        with pytest.raises(ValueError):
            store.add("p", np.zeros(1))


class TestOptimizer:
    def test_adam_descends_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        p = ad.leaf(np.zeros(3))
        p.ensure_grad()
        opt = Adam([p], lr=0.05)
        for _ in range(400):
            p.grad.fill(0.0)
            backward(ad.reduce_sum(ad.mul(ad.sub(p, ad.constant(target)),
                                          ad.sub(p, ad.constant(target)))))
            opt.step()
        assert np.allclose(p.value, target, atol=1e-3)

    def test_clip_global_norm(self):
        p = ad.leaf(np.zeros(4))
        p.grad = np.full(4, 10.0)
        norm = clip_global_norm([p], 1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-6)

    def test_zero_lr_keeps_params_bitwise(self, rng):
        p = ad.leaf(rng.standard_normal(6).astype(np.float32))
        before = p.value.tobytes()
        opt = Adam([p], lr=0.0)
        p.grad = rng.standard_normal(6).astype(np.float32)
        opt.step()
        assert p.value.tobytes() == before
