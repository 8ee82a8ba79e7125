from __future__ import annotations

import numpy as np
import pytest

from condctc import diffcore as dc
from condctc.diffcore import ContractError, ParamStore, ShapeError, Tensor


RNG = np.random.default_rng(42)


def weighted_mean(node: Tensor, weights: Tensor) -> Tensor:
    """Scalar objective that keeps gradients non-degenerate."""
    return dc.mean_reduce(dc.mul(node, weights))


def make(shape):
    return Tensor(RNG.normal(size=shape))


class TestOpGradients:
    """Every registered op must agree with central finite differences."""

    def check(self, build, params, tol=1e-4):
        err = dc.grad_check(build, params, eps=1e-5)
        assert err < tol, f"grad check failed: {err}"

    def test_matmul(self):
        a, b = make((4, 5)), make((5, 3))
        w = make((4, 3))
        self.check(lambda: weighted_mean(dc.matmul(a, b), w), [a, b])

    def test_matmul_nt(self):
        a, b = make((4, 5)), make((6, 5))
        w = make((4, 6))
        self.check(lambda: weighted_mean(dc.matmul_nt(a, b, 0.37), w), [a, b])

    def test_transpose(self):
        a = make((3, 5))
        w = make((5, 3))
        self.check(lambda: weighted_mean(dc.transpose(a), w), [a])

    def test_add_and_mul(self):
        a, b = make((4, 4)), make((4, 4))
        w = make((4, 4))
        self.check(lambda: weighted_mean(dc.add(a, b), w), [a, b])
        self.check(lambda: weighted_mean(dc.mul(a, b), w), [a, b])

    def test_scale(self):
        a = make((3, 3))
        w = make((3, 3))
        self.check(lambda: weighted_mean(dc.scale(a, -1.7), w), [a])

    def test_add_bias(self):
        x, b = make((5, 4)), make((4,))
        w = make((5, 4))
        self.check(lambda: weighted_mean(dc.add_bias(x, b), w), [x, b])

    def test_affine_rows(self):
        x, g, b = make((5, 4)), make((4,)), make((4,))
        w = make((5, 4))
        self.check(lambda: weighted_mean(dc.affine_rows(x, g, b), w), [x, g, b])

    def test_linear(self):
        x, wgt, b = make((5, 4)), make((4, 6)), make((6,))
        w = make((5, 6))
        self.check(lambda: weighted_mean(dc.linear(x, wgt, b), w), [x, wgt, b])

    def test_softmax_rows(self):
        x = make((5, 6))
        w = make((5, 6))
        self.check(lambda: weighted_mean(dc.softmax_rows(x), w), [x])

    def test_log_softmax_rows(self):
        x = make((5, 6))
        w = make((5, 6))
        self.check(lambda: weighted_mean(dc.log_softmax_rows(x), w), [x])

    def test_layer_norm_rows(self):
        x = make((5, 6))
        w = make((5, 6))
        self.check(lambda: weighted_mean(dc.layer_norm_rows(x), w), [x])

    def test_swish(self):
        x = make((5, 6))
        w = make((5, 6))
        self.check(lambda: weighted_mean(dc.swish(x), w), [x])

    def test_depthwise_conv_rows(self):
        x, k = make((7, 5)), make((3, 5))
        w = make((7, 5))
        self.check(lambda: weighted_mean(dc.depthwise_conv_rows(x, k), w), [x, k])

    def test_slice_and_concat_cols(self):
        x = make((4, 6))
        w = make((4, 3))
        self.check(lambda: weighted_mean(dc.slice_cols(x, 1, 4), w), [x])
        w2 = make((4, 12))
        self.check(lambda: weighted_mean(dc.concat_cols([x, x]), w2), [x])

    def test_concat_rows_and_mask(self):
        x = make((4, 5))
        w = make((8, 5))
        self.check(lambda: weighted_mean(dc.concat_rows([x, x]), w), [x])
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        w3 = make((4, 5))
        self.check(lambda: weighted_mean(dc.mask_rows(x, mask), w3), [x])

    def test_mean_reduce(self):
        x = make((4, 5))
        w = make((4, 5))
        self.check(lambda: dc.mean_reduce(dc.mul(x, w)), [x, w])

    def test_random_shapes_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            rows = int(rng.integers(1, 9))
            cols = int(rng.integers(2, 9))
            x = Tensor(rng.normal(size=(rows, cols)))
            w = Tensor(rng.normal(size=(rows, cols)))
            self.check(lambda: weighted_mean(dc.swish(dc.layer_norm_rows(x)), w), [x])


class TestBackwardSemantics:
    def test_square(self):
        x = Tensor(np.float64(3.0))
        dc.backward(dc.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_product(self):
        x, y = Tensor(np.float64(2.0)), Tensor(np.float64(5.0))
        dc.backward(dc.mul(x, y))
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(2.0)

    def test_swish_derivative_at_zero(self):
        x = Tensor(np.zeros(()))
        dc.backward(dc.swish(x))
        assert float(x.grad) == pytest.approx(0.5)

    def test_repeated_backward_is_identical(self):
        x = Tensor(RNG.normal(size=(3, 3)))
        w = Tensor(RNG.normal(size=(3, 3)))
        loss = dc.mean_reduce(dc.mul(dc.softmax_rows(x), w))
        dc.backward(loss)
        first = x.grad.copy()
        dc.backward(loss)
        assert np.array_equal(first, x.grad)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            dc.backward(Tensor(np.ones((2, 2))))

    def test_unused_parameters_keep_zero_grads(self):
        store = ParamStore()
        used = store.add("used", np.array([[1.0, 2.0]]))
        unused = store.add("unused", np.array([[3.0, 4.0]]))
        store.zero_grad()
        dc.backward(dc.mean_reduce(dc.mul(used, used)))
        assert np.array_equal(unused.grad, np.zeros((1, 2)))
        assert np.any(used.grad != 0.0)

    def test_shared_node_accumulates_both_paths(self):
        x = Tensor(np.float64(3.0))
        # f = x*x + x*x = 2x^2, f' = 4x
        loss = dc.add(dc.mul(x, x), dc.mul(x, x))
        dc.backward(loss)
        assert float(x.grad) == pytest.approx(12.0)

    def test_softmax_symmetry_forward(self):
        out = dc.softmax_rows(Tensor(np.zeros((1, 2))))
        assert np.allclose(out.value, [[0.5, 0.5]])

    def test_layer_norm_constant_row_is_zero(self):
        out = dc.layer_norm_rows(Tensor(np.full((1, 4), 3.7)))
        assert np.allclose(out.value, 0.0)

    def test_shape_errors_name_the_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            dc.matmul(make((2, 3)), make((2, 3)))
        with pytest.raises(ShapeError, match="add"):
            dc.add(make((2, 3)), make((3, 2)))
        with pytest.raises(ShapeError, match="depthwise"):
            dc.depthwise_conv_rows(make((4, 3)), make((2, 3)))
        with pytest.raises(ShapeError, match="add_bias"):
            dc.add_bias(make((2, 3)), make((2,)))

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(6, 6)))
            w = Tensor(dc.glorot_uniform(rng, (6, 6)))
            b = Tensor(np.zeros(6))
            loss = dc.mean_reduce(dc.mul(dc.swish(dc.linear(x, w, b)), x))
            dc.backward(loss)
            return loss.value.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestGradCheckHarness:
    def test_quadratic_form(self):
        x = Tensor(RNG.normal(size=(3, 3)))
        err = dc.grad_check(lambda: dc.mean_reduce(dc.mul(x, x)), [x], eps=1e-5)
        assert err < 1e-8

    def test_softmax_cross_entropy_closed_form(self):
        # d(mean CE)/d(logits) has closed form (softmax - onehot) / rows
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(4, 5)))
        onehot = np.zeros((4, 5))
        onehot[np.arange(4), [0, 2, 1, 4]] = 1.0

        def loss():
            return dc.scale(dc.mean_reduce(dc.mul(dc.log_softmax_rows(logits), Tensor(onehot))), -5.0)

        err = dc.grad_check(loss, [logits], eps=1e-5)
        assert err < 1e-6
        dc.backward(loss())
        shifted = logits.value - logits.value.max(axis=1, keepdims=True)
        soft = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        assert np.allclose(logits.grad, (soft - onehot) / 4.0, atol=1e-12)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        with pytest.raises(ContractError):
            store.add("w", np.ones(3))

    def test_moment_shapes_match(self):
        store = ParamStore()
        store.add("w", np.ones((2, 3)))
        m, v = store.moments("w")
        assert m.shape == v.shape == (2, 3)
        assert not m.any() and not v.any()

    def test_clone_is_independent(self):
        store = ParamStore()
        t = store.add("w", np.ones(3))
        copy = store.clone()
        t.value[0] = 99.0
        assert copy["w"].value[0] == 1.0

    def test_save_load_roundtrip(self, tmp_path):
        store = ParamStore()
        store.add("layer.w", RNG.normal(size=(3, 4)))
        store.add("layer.b", RNG.normal(size=4))
        store.add("scalarish", np.float64(2.5))
        path = tmp_path / "params.ntc"
        store.save(path, meta={"note": "test"})
        loaded, meta = ParamStore.load(path)
        assert meta == {"note": "test"}
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded[name].value, store[name].value)

    def test_save_is_byte_deterministic(self, tmp_path):
        store = ParamStore()
        store.add("w", RNG.normal(size=(5, 5)))
        a, b = tmp_path / "a.ntc", tmp_path / "b.ntc"
        store.save(a)
        store.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_load_values_validates(self):
        store = ParamStore()
        store.add("w", np.ones((2, 2)))
        with pytest.raises(ContractError):
            store.load_values({"x": np.ones((2, 2))})
        with pytest.raises(ContractError):
            store.load_values({"w": np.ones(3)})
