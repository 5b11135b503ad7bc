"""End-to-end network tests: shapes, determinism, causality, serialization."""

import numpy as np
import pytest

from lfit.dataset import WindowBatch
from lfit.errors import ConfigError, ContractError, DataError, ModelFormatError
from lfit.model import (
    HORIZON_POSITION,
    LfitConfig,
    LfitModel,
    extract_explanation,
    load_model,
    save_model,
)
from lfit.tensor import check_gradient
from lfit.training import Standardizer, _targets_for_loss, lfit_objective

K, TAU = 3, 2
QUANTILES = (0.1, 0.5, 0.9)


def tiny_config(statics: bool = True, **overrides) -> LfitConfig:
    base = dict(
        target_channels=["level"],
        encoder_length=K,
        horizon=TAU,
        observed_channels=["flow"],
        known_continuous_channels=[],
        known_categorical_channels={"kind": 2},
        static_channels={"site": 3} if statics else {},
        d_model=4,
        n_heads=2,
        quantiles=QUANTILES,
        dropout_rate=0.1,
    )
    base.update(overrides)
    return LfitConfig(**base)


def tiny_batch(B: int = 2, statics: bool = True, seed: int = 0) -> WindowBatch:
    rng = np.random.default_rng(seed)
    return WindowBatch(
        past_continuous=rng.normal(size=(B, K, 2)),
        past_categorical=rng.integers(0, 2, size=(B, K, 1)),
        future_continuous=np.zeros((B, TAU, 0)),
        future_categorical=rng.integers(0, 2, size=(B, TAU, 1)),
        future_targets=rng.normal(size=(B, TAU, 1)),
        static_indices=rng.integers(0, 3, size=(B, 1)) if statics else None,
        series_ids=np.array([f"s{i}" for i in range(B)], dtype=object),
        anchors=np.arange(B) + K,
        past_continuous_names=["level", "flow"],
        known_continuous_names=[],
        known_categorical_names=["kind"],
        target_names=["level"],
        static_names=["site"] if statics else [],
    )


def tiny_model(statics: bool = True, seed: int = 0) -> LfitModel:
    return LfitModel(tiny_config(statics), np.random.default_rng(seed))


class TestForward:
    def test_output_shape_contract(self):
        model = tiny_model()
        batch = tiny_batch(B=4)
        out = model.forward_tensors(batch)
        assert out.shape == (4, 1, TAU, len(QUANTILES))
        forecast, _ = model.predict(batch)
        assert forecast.values.shape == (4, 1, TAU, len(QUANTILES))
        assert np.all(np.isfinite(forecast.values))

    def test_identical_elements_identical_outputs(self):
        model = tiny_model()
        batch = tiny_batch(B=3).take([0, 0, 1])
        forecast, explanation = model.predict(batch)
        np.testing.assert_array_equal(forecast.values[0], forecast.values[1])
        np.testing.assert_array_equal(explanation.mean_attention[0], explanation.mean_attention[1])
        np.testing.assert_array_equal(
            explanation.past_variable_weights[0], explanation.past_variable_weights[1]
        )
        np.testing.assert_array_equal(explanation.static_weights[0], explanation.static_weights[1])
        assert not np.array_equal(forecast.values[0], forecast.values[2])

    def test_future_targets_never_leak(self):
        model = tiny_model()
        batch = tiny_batch()
        base, _ = model.predict(batch)
        perturbed = tiny_batch()
        perturbed.future_targets = perturbed.future_targets + 1e6
        shifted, _ = model.predict(perturbed)
        np.testing.assert_array_equal(base.values, shifted.values)

    def test_no_static_channels_still_finite(self):
        model = tiny_model(statics=False)
        batch = tiny_batch(statics=False)
        forecast, explanation = model.predict(batch)
        assert np.all(np.isfinite(forecast.values))
        assert explanation.static_weights is None
        assert explanation.static_channels == []
        assert model.pk_encoder is None

    def test_selection_and_attention_rows_are_distributions(self):
        model = tiny_model()
        _, ex = model.predict(tiny_batch(B=3))
        for block in (ex.past_variable_weights, ex.future_variable_weights, ex.static_weights):
            assert np.all(block >= 0)
            np.testing.assert_allclose(block.sum(axis=-1), 1.0, atol=1e-10)
        assert np.all(ex.mean_attention >= 0)
        np.testing.assert_allclose(ex.mean_attention.sum(axis=-1), 1.0, atol=1e-10)

    def test_attention_is_causal(self):
        _, ex = tiny_model().predict(tiny_batch())
        upper = np.triu_indices(K + TAU, k=1)
        assert np.all(ex.mean_attention[:, upper[0], upper[1]] == 0.0)

    def test_explanation_reproducible_across_runs(self):
        batch = tiny_batch()
        ex1 = extract_explanation(tiny_model(seed=7), batch)
        ex2 = extract_explanation(tiny_model(seed=7), batch)
        np.testing.assert_array_equal(ex1.mean_attention, ex2.mean_attention)
        np.testing.assert_array_equal(ex1.past_variable_weights, ex2.past_variable_weights)
        np.testing.assert_array_equal(ex1.static_weights, ex2.static_weights)

    def test_explanation_names_include_position_channel(self):
        _, ex = tiny_model().predict(tiny_batch())
        assert ex.past_channels == ["level", "flow", "kind"]
        assert ex.future_channels == ["kind", HORIZON_POSITION]
        assert ex.past_variable_weights.shape[-1] == len(ex.past_channels)
        assert ex.future_variable_weights.shape[-1] == len(ex.future_channels)
        assert ex.encoder_length == K

    def test_predict_destandardizes_with_model_standardizer(self):
        model = tiny_model()
        model.standardizer = Standardizer({"level": (2.0, 3.0), "flow": (0.0, 1.0)})
        batch = tiny_batch()
        raw = model.forward_tensors(batch).data
        forecast, _ = model.predict(batch)
        np.testing.assert_allclose(forecast.values, raw * 3.0 + 2.0, atol=1e-12)

    def test_median_requires_midpoint_quantile(self):
        model = tiny_model()
        forecast, _ = model.predict(tiny_batch())
        assert forecast.median().shape == (2, 1, TAU)
        np.testing.assert_array_equal(forecast.median(), forecast.values[..., 1])
        forecast.quantiles = (0.1, 0.9)
        with pytest.raises(ConfigError):
            forecast.median()


class TestBatchValidation:
    def test_wrong_channel_names_rejected(self):
        model = tiny_model()
        batch = tiny_batch()
        batch.past_continuous_names = ["level", "pressure"]
        with pytest.raises(ContractError):
            model.forward_tensors(batch)

    def test_wrong_window_size_rejected(self):
        model = LfitModel(tiny_config(encoder_length=K + 1), np.random.default_rng(0))
        with pytest.raises(ContractError):
            model.forward_tensors(tiny_batch())

    def test_missing_statics_rejected(self):
        model = tiny_model(statics=True)
        batch = tiny_batch(statics=False)
        batch.past_continuous_names = ["level", "flow"]
        with pytest.raises(ContractError):
            model.forward_tensors(batch)

    def test_non_finite_input_names_channel(self):
        model = tiny_model()
        batch = tiny_batch()
        batch.past_continuous[0, 1, 1] = np.nan
        with pytest.raises(DataError, match="flow"):
            model.forward_tensors(batch)


class TestGradient:
    def test_full_network_gradient(self):
        # Looser tolerance than single layers, acknowledging the depth;
        # dropout off so the loss is deterministic under central differences.
        model = tiny_model(seed=1)
        batch = tiny_batch(B=2, seed=1)

        def loss_fn(_):
            out = model.forward_tensors(batch, training=False)
            return lfit_objective(out, _targets_for_loss(batch), QUANTILES)

        worst = 0.0
        for name, p in model.parameters():
            err = check_gradient(loss_fn, p, step=1e-5)
            assert err <= 1e-3, f"gradient mismatch {err:.2e} at {name}"
            worst = max(worst, err)
        assert worst <= 1e-3


class TestConfig:
    def test_round_trip_preserves_quantiles(self):
        cfg = tiny_config()
        clone = LfitConfig.from_dict(cfg.to_dict())
        assert clone == cfg
        assert clone.quantiles == QUANTILES
        assert isinstance(clone.quantiles, tuple)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(target_channels=[])
        with pytest.raises(ConfigError):
            tiny_config(quantiles=(0.5, 0.5))
        with pytest.raises(ConfigError):
            tiny_config(quantiles=(0.1, 1.2))
        with pytest.raises(ConfigError):
            tiny_config(d_model=6, n_heads=4)
        with pytest.raises(ConfigError):
            tiny_config(horizon=0)
        with pytest.raises(ConfigError):
            tiny_config(dropout_rate=1.0)

    def test_channel_name_properties(self):
        cfg = tiny_config()
        assert cfg.past_channel_names == ["level", "flow", "kind"]
        assert cfg.future_channel_names == ["kind", HORIZON_POSITION]


class TestSerialization:
    def test_save_load_forecast_bit_exact(self, tmp_path):
        model = tiny_model()
        model.standardizer = Standardizer({"level": (1.5, 0.5), "flow": (-1.0, 2.0)})
        model.vocabularies = {"site": ["a", "b", "c"], "kind": [0, 1]}
        batch = tiny_batch()
        base, base_ex = model.predict(batch)

        path = tmp_path / "model.lfit"
        save_model(model, path)
        loaded = load_model(path)

        again, again_ex = loaded.predict(batch)
        np.testing.assert_array_equal(base.values, again.values)
        np.testing.assert_array_equal(base_ex.mean_attention, again_ex.mean_attention)
        assert loaded.config == model.config
        assert loaded.standardizer.stats == model.standardizer.stats
        assert loaded.vocabularies == model.vocabularies

    def test_parameters_survive_bitwise(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "model.lfit"
        save_model(model, path)
        loaded = load_model(path)
        for (name_a, p_a), (name_b, p_b) in zip(model.parameters(), loaded.parameters()):
            assert name_a == name_b
            assert p_a.data.tobytes() == p_b.data.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.lfit"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "model.lfit"
        save_model(tiny_model(), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "model.lfit"
        save_model(tiny_model(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "model.lfit"
        save_model(tiny_model(), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_no_statics_model_round_trips(self, tmp_path):
        model = tiny_model(statics=False)
        path = tmp_path / "model.lfit"
        save_model(model, path)
        loaded = load_model(path)
        batch = tiny_batch(statics=False)
        np.testing.assert_array_equal(model.predict(batch)[0].values, loaded.predict(batch)[0].values)
