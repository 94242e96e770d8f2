import numpy as np
import pytest

from mofhei.errors import ShapeError
from mofhei.nncore import (
    AvgPool2D, BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2D, Model,
    PolyAct, ReLU, Sigmoid, Softmax, SquareAct, layer_forward,
)
from oracles import (
    finite_difference_grads, naive_conv2d, naive_dense, naive_poly, naive_pool2d,
    relative_error,
)


def build_single(layer, input_shape, seed=0):
    return Model(input_shape, [layer], seed=seed)


class TestForwardOracles:
    def test_dense_identity_weights(self):
        m = build_single(Dense(2), (2,))
        layer = m.layers[0]
        layer.w[...] = np.eye(2)
        layer.b[...] = 0
        assert np.array_equal(layer_forward(layer, [3.0, 4.0]), [3.0, 4.0])

    def test_dense_matches_triple_loop(self, rng):
        m = build_single(Dense(8), (8,))
        layer = m.layers[0]
        layer.w[...] = rng.normal(size=(8, 8))
        layer.b[...] = rng.normal(size=8)
        x = rng.normal(size=(8, 8))
        assert np.abs(m.forward(x) - naive_dense(x, layer.w, layer.b)).max() < 1e-12

    def test_conv_scalar_scaling(self):
        m = build_single(Conv2D(1, 1), (2, 2, 1))
        layer = m.layers[0]
        layer.w[...] = 2.0
        layer.b[...] = 0.0
        out = layer_forward(layer, [[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(out, [[2.0, 4.0], [6.0, 8.0]])

    @pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (2, "same")])
    def test_conv_matches_direct_loop(self, rng, stride, padding):
        for _ in range(4):
            h, w = rng.integers(5, 9, size=2)
            k = int(rng.integers(1, 4))
            f = int(rng.integers(1, 4))
            m = build_single(Conv2D(f, 3, stride, padding), (int(h), int(w), k))
            layer = m.layers[0]
            layer.w[...] = rng.normal(size=layer.w.shape)
            layer.b[...] = rng.normal(size=f)
            x = rng.normal(size=(2, h, w, k))
            want = naive_conv2d(x, layer.w, layer.b, (stride, stride), padding)
            assert np.abs(m.forward(x) - want).max() < 1e-12

    def test_same_padding_output_size(self):
        m = build_single(Conv2D(6, 5, 1, "same"), (28, 28, 1))
        assert m.output_shape == (28, 28, 6)

    @pytest.mark.parametrize("mode,cls", [("max", MaxPool2D), ("avg", AvgPool2D)])
    def test_pool_matches_loop(self, rng, mode, cls):
        m = build_single(cls(2, 2), (6, 6, 3))
        x = rng.normal(size=(3, 6, 6, 3))
        want = naive_pool2d(x, (2, 2), (2, 2), mode)
        assert np.abs(m.forward(x) - want).max() < 1e-12

    def test_polyact_example(self):
        m = build_single(PolyAct(2, coeffs=[1.0, 0.0, 1.0]), (2,))
        out = layer_forward(m.layers[0], [2.0, -3.0])
        assert np.allclose(out, naive_poly(np.array([2.0, -3.0]), [1, 0, 1]))
        assert np.array_equal(out, [5.0, 10.0])

    def test_square_act(self, rng):
        m = build_single(SquareAct(), (5,))
        x = rng.normal(size=(4, 5))
        assert np.array_equal(m.forward(x), x * x)

    def test_dropout_identity_at_inference(self, rng):
        m = build_single(Dropout(0.5), (10,))
        x = rng.normal(size=(4, 10))
        assert np.array_equal(m.forward(x, train_mode=False), x)

    def test_softmax_rows_sum_to_one(self, rng):
        m = build_single(Softmax(), (7,))
        out = m.forward(rng.normal(size=(5, 7)))
        assert np.allclose(out.sum(axis=1), 1.0)

    def test_forward_determinism(self):
        a = Model((4,), [Dense(3), ReLU(), Dense(2)], seed=7)
        b = Model((4,), [Dense(3), ReLU(), Dense(2)], seed=7)
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(a.forward(x), b.forward(x))

    def test_shape_mismatch_is_structured(self):
        m = Model((4,), [Dense(3)], seed=0)
        with pytest.raises(ShapeError) as ei:
            m.forward(np.zeros((2, 5)))
        assert ei.value.expected == (4,)
        assert ei.value.actual == (5,)

    def test_all_outputs_finite(self, rng):
        m = Model((8, 8, 2), [Conv2D(3, 3), ReLU(), MaxPool2D(2), Flatten(),
                              Dense(10), Sigmoid()], seed=3)
        out = m.forward(rng.normal(size=(4, 8, 8, 2)))
        assert np.isfinite(out).all()


class TestGradients:
    """Analytic gradients vs central finite differences (eps=1e-5, rel 1e-4)."""

    def check_layer(self, layer, input_shape, rng, batch=3):
        model = build_single(layer, input_shape, seed=1)
        x = rng.normal(size=(batch, *input_shape))
        y = rng.normal(size=(batch, *model.output_shape))

        def loss():
            return float(((model.forward(x, train_mode=False) - y) ** 2).sum())

        out = model.forward(x, train_mode=False)
        grad = 2.0 * (out - y)
        layer.backward(grad)

        params = layer.param_arrays()
        if params:
            want = finite_difference_grads(loss, list(params.values()))
            for (name, _), fd in zip(params.items(), want):
                err = relative_error(layer.grads[name], fd)
                assert err < 1e-4, f"{layer.kind}.{name}: rel err {err:.2e}"

    def test_dense(self, rng):
        self.check_layer(Dense(4), (5,), rng)

    def test_conv2d(self, rng):
        self.check_layer(Conv2D(3, 3, 1, "same"), (6, 6, 2), rng)

    def test_conv2d_strided(self, rng):
        self.check_layer(Conv2D(2, 3, 2, "valid"), (7, 7, 3), rng)

    def test_polyact(self, rng):
        self.check_layer(PolyAct(3), (6,), rng)

    def test_batchnorm(self, rng):
        layer = BatchNorm()
        model = build_single(layer, (5,), seed=1)
        x = rng.normal(size=(8, 5))
        y = rng.normal(size=(8, 5))

        # finite differences must run the same (inference-stats) path the
        # analytic pass differentiates, so freeze the batch stats first
        layer.moving_mean[...] = x.mean(axis=0)
        layer.moving_var[...] = x.var(axis=0)

        def loss():
            return float(((model.forward(x, train_mode=False) - y) ** 2).sum())

        out = model.forward(x, train_mode=False)
        layer.backward(2.0 * (out - y))
        want = finite_difference_grads(loss, [layer.gamma, layer.beta])
        assert relative_error(layer.grads["gamma"], want[0]) < 1e-4
        assert relative_error(layer.grads["beta"], want[1]) < 1e-4

    def test_input_gradients_whole_stack(self, rng):
        model = Model((6, 6, 2), [Conv2D(2, 3), ReLU(), AvgPool2D(2), Flatten(),
                                  Dense(4), Sigmoid()], seed=2)
        x = rng.normal(size=(2, 6, 6, 2))
        y = rng.normal(size=(2, 4))

        def loss():
            return float(((model.forward(x) - y) ** 2).sum())

        grad = 2.0 * (model.forward(x) - y)
        for layer in reversed(model.layers):
            grad = layer.backward(grad)
        fd = finite_difference_grads(loss, [x])[0]
        assert relative_error(grad, fd) < 1e-4


def test_layer_forward_rejects_bad_shape():
    m = build_single(Dense(3), (4,))
    with pytest.raises(ShapeError):
        layer_forward(m.layers[0], [1.0, 2.0])


def test_model_requires_parameterized_layer_for_output_index():
    m = Model((4,), [Flatten()], seed=0)
    with pytest.raises(ValueError):
        m.output_layer_index()
