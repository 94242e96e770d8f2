import numpy as np
import pytest

from mofhei.datasets import synthetic
from mofhei.nncore import (
    BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2D, Model, ReLU,
    Sigmoid, Softmax, evaluate,
)
from mofhei.transform import (
    ConversionLog, HefConfig, convert_activation, convert_pooling,
    fold_batchnorm, make_he_friendly, strip_dropout,
)


def quick_cfg(**kw):
    defaults = dict(transfer_epochs=1, finetune_epochs=1, patience=2,
                    batch_size=32, seed=0)
    defaults.update(kw)
    return HefConfig(**defaults)


def small_cnn(seed=0, with_bn=False, with_dropout=False):
    layers = [Conv2D(4, 3, 1, "same")]
    if with_bn:
        layers.append(BatchNorm())
    layers += [ReLU(), MaxPool2D(2), Flatten(), Dense(8), ReLU()]
    if with_dropout:
        layers.append(Dropout(0.5))
    layers += [Dense(3), Softmax()]
    return Model((8, 8, 1), layers, seed=seed)


def image_blobs(n, seed=0):
    """Tiny 3-class image dataset: bright quadrant marks the class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n)
    x = rng.random((n, 8, 8, 1)) * 0.2
    for i, c in enumerate(labels):
        r, col = divmod(c, 2)
        x[i, r * 4:(r + 1) * 4, col * 4:(col + 1) * 4, 0] += 0.8
    y = np.zeros((n, 3))
    y[np.arange(n), labels] = 1
    from mofhei.nncore import Dataset
    return Dataset(x, y)


@pytest.fixture(scope="module")
def data():
    return image_blobs(96, seed=0), image_blobs(32, seed=1)


class TestConvertPooling:
    def test_window_and_stride_carry_over(self, data):
        m = small_cnn()
        out = convert_pooling(m, 2, *data, quick_cfg())
        assert out.layers[2].kind == "avgpool2d"
        assert out.layers[2].window == (2, 2)
        assert out.layers[2].stride == (2, 2)
        assert out.output_shape == m.output_shape

    def test_constant_windows_make_conversion_exact(self, data):
        m = Model((4, 4, 1), [MaxPool2D(2), Flatten(), Dense(2)], seed=0)
        out = convert_pooling(m, 0, *data, quick_cfg(transfer_epochs=0, finetune_epochs=0))
        x = np.repeat(np.repeat(np.random.default_rng(0).random((3, 2, 2, 1)), 2, 1), 2, 2)
        np.testing.assert_array_equal(m.forward(x), out.forward(x))

    def test_wrong_index_rejected(self, data):
        m = small_cnn()
        with pytest.raises(ValueError):
            convert_pooling(m, 0, *data, quick_cfg())

    def test_original_model_untouched(self, data):
        m = small_cnn()
        before = m.layers[2].kind
        convert_pooling(m, 2, *data, quick_cfg())
        assert m.layers[2].kind == before


class TestConvertActivation:
    def test_square_mode_swaps_kind_without_parameters(self, data):
        m = small_cnn()
        out = convert_activation(m, 1, "square", *data, quick_cfg(finetune_epochs=0))
        assert out.layers[1].kind == "squareact"
        assert out.layers[1].n_params() == 0

    def test_poly_mode_has_degree_plus_one_coefficients(self, data):
        m = small_cnn()
        cfg = quick_cfg(poly_degree=2, transfer_epochs=0, finetune_epochs=0)
        out = convert_activation(m, 1, "poly", *data, cfg)
        assert out.layers[1].kind == "polyact"
        assert out.layers[1].coeffs.shape == (3,)
        assert np.abs(out.layers[1].coeffs).max() <= cfg.coeff_init_scale

    def test_coefficient_phase_freezes_existing_weights(self, data):
        m = small_cnn()
        cfg = quick_cfg(transfer_epochs=2, finetune_epochs=0)
        out = convert_activation(m, 1, "poly", *data, cfg)
        for i in (0, 4, 7):
            for name, arr in m.layers[i].param_arrays().items():
                assert np.array_equal(arr, out.layers[i].param_arrays()[name]), \
                    f"layer {i} {name} moved during coefficient-only phase"
        assert not np.array_equal(out.layers[1].coeffs, np.zeros(3))

    def test_non_activation_index_rejected(self, data):
        m = small_cnn()
        with pytest.raises(ValueError):
            convert_activation(m, 0, "poly", *data, quick_cfg())


class TestStructuralOps:
    def test_identity_batchnorm_folds_to_identity(self):
        m = Model((5,), [Dense(4), BatchNorm()], seed=0)
        w_before = m.layers[0].w.copy()
        b_before = m.layers[0].b.copy()
        folded = fold_batchnorm(m)
        assert np.abs(folded.layers[0].w - w_before).max() < 1e-12
        assert np.abs(folded.layers[0].b - b_before).max() < 1e-12
        assert all(l.kind != "batchnorm" for l in folded.layers)

    @pytest.mark.parametrize("image", [False, True])
    def test_random_batchnorm_fold_matches_inference(self, image):
        rng = np.random.default_rng(7)
        if image:
            m = Model((6, 6, 2), [Conv2D(3, 3), BatchNorm(), Flatten(), Dense(4)], seed=1)
            x = rng.normal(size=(5, 6, 6, 2))
            bn = m.layers[1]
        else:
            m = Model((5,), [Dense(4), BatchNorm(), Dense(2)], seed=1)
            x = rng.normal(size=(5, 5))
            bn = m.layers[1]
        bn.gamma[...] = rng.uniform(0.5, 2.0, bn.gamma.shape)
        bn.beta[...] = rng.normal(size=bn.beta.shape)
        bn.moving_mean[...] = rng.normal(size=bn.moving_mean.shape)
        bn.moving_var[...] = rng.uniform(0.25, 4.0, bn.moving_var.shape)
        folded = fold_batchnorm(m)
        assert np.abs(folded.forward(x) - m.forward(x)).max() < 1e-10

    def test_batchnorm_without_host_layer_rejected(self):
        m = Model((4, 4, 1), [BatchNorm(), Flatten(), Dense(2)], seed=0)
        from mofhei.errors import NotHeFriendlyError
        with pytest.raises(NotHeFriendlyError):
            fold_batchnorm(m)

    def test_strip_dropout_is_bit_identical_at_inference(self):
        m = Model((6,), [Dense(5), ReLU(), Dropout(0.5), Dense(2)], seed=0)
        stripped = strip_dropout(m)
        assert all(l.kind != "dropout" for l in stripped.layers)
        x = np.random.default_rng(0).normal(size=(4, 6))
        assert np.array_equal(stripped.forward(x), m.forward(x))


class TestMakeHeFriendly:
    def test_already_he_friendly_is_fixed_point(self, data):
        from mofhei.nncore import AvgPool2D, SquareAct
        m = Model((8, 8, 1), [Conv2D(3, 3), SquareAct(), AvgPool2D(2),
                              Flatten(), Dense(3)], seed=0)
        out, log = make_he_friendly(m, *data, quick_cfg())
        assert len(log) == 0
        assert out is m

    def test_full_conversion_structure_and_log_order(self, data):
        m = small_cnn(with_bn=True, with_dropout=True)
        out, log = make_he_friendly(m, *data, quick_cfg())
        assert out.is_he_friendly()
        kinds = [l.kind for l in out.layers]
        assert "maxpool2d" not in kinds and "relu" not in kinds
        assert "batchnorm" not in kinds and "dropout" not in kinds
        assert "softmax" not in kinds
        # pooling entries precede activation entries, each phase descending
        pool_entries = [e for e in log.entries if e.from_kind == "maxpool2d"]
        act_entries = [e for e in log.entries if e.from_kind in ("relu", "sigmoid")]
        assert log.entries[:len(pool_entries)] == pool_entries
        pool_idx = [e.layer_index for e in pool_entries]
        act_idx = [e.layer_index for e in act_entries]
        assert pool_idx == sorted(pool_idx, reverse=True)
        assert act_idx == sorted(act_idx, reverse=True)

    def test_two_pools_four_relus_give_six_entries(self, data):
        m = Model((8, 8, 1), [
            Conv2D(3, 3, 1, "same"), ReLU(), MaxPool2D(2),
            Conv2D(4, 3, 1, "same"), ReLU(), MaxPool2D(2),
            Flatten(), Dense(8), ReLU(), Dense(6), ReLU(), Dense(3), Softmax(),
        ], seed=0)
        out, log = make_he_friendly(m, *data, quick_cfg(transfer_epochs=0, finetune_epochs=0))
        assert len(log) == 6
        assert out.is_he_friendly()

    def test_log_serializes_to_json_list(self, data, tmp_path):
        m = small_cnn()
        _, log = make_he_friendly(m, *data, quick_cfg(transfer_epochs=0, finetune_epochs=0))
        path = tmp_path / "log.json"
        log.save(str(path))
        import json
        obj = json.loads(path.read_text())
        assert isinstance(obj, list) and len(obj) == len(log)
        assert {"layer_index", "from_kind", "to_kind", "val_metric_before",
                "val_metric_after", "epochs_used"} <= set(obj[0])

    def test_conversion_preserves_accuracy_on_easy_task(self, data):
        train_ds, val_ds = data
        m = small_cnn(seed=3)
        from mofhei.nncore import TrainConfig, train
        train(m, train_ds, val_ds, TrainConfig(epochs=15, learning_rate=1e-2,
                                               batch_size=32, seed=0, patience_epochs=5))
        base = evaluate(m, val_ds, "accuracy")
        assert base > 0.9
        out, log = make_he_friendly(
            m, train_ds, val_ds,
            quick_cfg(transfer_epochs=10, finetune_epochs=10, transfer_lr=1e-2,
                      finetune_lr=1e-3, patience=5))
        converted = evaluate(out, val_ds, "accuracy")
        assert converted >= base - 0.1
        assert out.metadata["stage"] == "hef"


def test_hefconfig_validation():
    with pytest.raises(ValueError):
        HefConfig(poly_degree=0)
    with pytest.raises(ValueError):
        HefConfig(transfer_lr=1e-4, finetune_lr=1e-3)
    with pytest.raises(ValueError):
        HefConfig(activation_mode="tanh")
