import numpy as np
import pytest

from hemsim.core import STEPS_PER_DAY, QuarterSeries, utc
from hemsim.datagen import ScalerParams
from hemsim.forecaster import (
    DivergenceError,
    ForecastSample,
    HistoryError,
    ModelConfig,
    TrainConfig,
    build_training_samples,
    default_finetune_config,
    evaluate_pinball,
    finetune,
    forward,
    forward_batch,
    inference_sample,
    init_model,
    load_weights,
    loss_and_gradients,
    parameter_spec,
    save_weights,
    train,
)
from hemsim.forecaster.model import loss_and_gradients_raw
from hemsim.forecaster.weights_io import (
    WeightChecksumError,
    WeightVersionError,
)

from fd_oracle import finite_difference_gradients, max_relative_error

TINY = ModelConfig(
    input_window=12,
    horizon=4,
    quantiles=(0.1, 0.5, 0.9),
    hidden_size=4,
    attention_heads=2,
    dropout=0.1,
)


def random_samples(config, n, rng, with_target=True):
    c = len(config.covariates)
    out = []
    for _ in range(n):
        out.append(
            ForecastSample(
                past_target=rng.uniform(0.0, 1.0, size=config.input_window),
                past_covariates=rng.uniform(-1.0, 1.0, size=(config.input_window, c)),
                future_covariates=rng.uniform(-1.0, 1.0, size=(config.horizon, c)),
                target=rng.uniform(0.0, 1.0, size=config.horizon) if with_target else None,
            )
        )
    return out


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.input_window == 672
        assert cfg.horizon == 96
        assert cfg.quantiles == (0.1, 0.5, 0.9)
        assert cfg.anchor_index == 1

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_size=30, attention_heads=4)

    def test_window_must_cover_horizon(self):
        with pytest.raises(ValueError):
            ModelConfig(input_window=48, horizon=96)

    def test_bad_quantiles(self):
        with pytest.raises(ValueError):
            ModelConfig(quantiles=(0.5, 0.5))
        with pytest.raises(ValueError):
            ModelConfig(quantiles=(0.0, 0.5))


def expected_parameter_count(cfg: ModelConfig) -> int:
    # Independent per-layer arithmetic (kept deliberately separate from
    # parameter_spec): embeddings, two selection networks, GRU, attention,
    # post-attention gate+norm, post GRN, quantile heads.
    d = cfg.hidden_size
    c = len(cfg.covariates)
    m_p, m_f = c + 1, c
    total = (m_p + m_f) * 2 * d  # per-feature embeddings (w: 1*d, b: d)

    def grn(din, dout, skip):
        n = din * d + d  # in
        n += d * dout + dout  # hid
        n += 2 * (dout * dout + dout)  # gate + val
        if skip:
            n += din * dout + dout
        n += 2 * dout  # layer norm affine
        return n

    total += grn(m_p * d, m_p, True) + grn(m_f * d, m_f, True)
    total += 2 * (d * 3 * d) + 3 * d  # GRU
    total += 4 * (d * d + d)  # attention q/k/v/o
    total += 2 * (d * d + d) + 2 * d  # post-attention gate + norm
    total += grn(d, d, False)
    total += cfg.n_quantiles * (d + 1)  # heads
    return total


class TestInit:
    def test_deterministic(self):
        a = init_model(TINY, seed=3)
        b = init_model(TINY, seed=3)
        assert a.equal_values(b)
        c = init_model(TINY, seed=4)
        assert not a.equal_values(c)

    def test_parameter_count_matches_architecture_formula(self):
        for cfg in (TINY, ModelConfig(), ModelConfig(hidden_size=8, attention_heads=2, quantiles=(0.2, 0.5, 0.8, 0.95))):
            w = init_model(cfg, seed=0)
            assert w.n_parameters == expected_parameter_count(cfg)

    def test_init_bounds(self):
        w = init_model(TINY, seed=1)
        for name, _, fan_in in parameter_spec(TINY):
            arr = w.params[name]
            if fan_in is None:
                continue
            assert np.all(np.abs(arr) <= 1.0 / np.sqrt(fan_in) + 1e-12), name


class TestForward:
    def test_output_shape_and_monotonicity(self):
        rng = np.random.default_rng(0)
        w = init_model(TINY, seed=0)
        fc = forward(w, random_samples(TINY, 1, rng)[0])
        assert fc.values.shape == (TINY.horizon, 3)
        assert np.all(np.isfinite(fc.values))
        assert np.all(np.diff(fc.values, axis=1) >= 0.0)

    def test_deterministic_inference(self):
        rng = np.random.default_rng(1)
        w = init_model(TINY, seed=0)
        s = random_samples(TINY, 1, rng)[0]
        a = forward(w, s)
        b = forward(w, s)
        np.testing.assert_array_equal(a.values, b.values)

    def test_batch_composition_invariance(self):
        rng = np.random.default_rng(2)
        w = init_model(TINY, seed=5)
        samples = random_samples(TINY, 5, rng)
        from hemsim.forecaster import stack_samples

        past, pc, fc, _ = stack_samples(samples)
        full = forward_batch(TINY, w.params, past, pc, fc)
        for i, s in enumerate(samples):
            solo = forward(w, s).values
            np.testing.assert_allclose(full[i], solo, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        w = init_model(TINY, seed=0)
        other = ModelConfig(input_window=16, horizon=4, hidden_size=4, attention_heads=2)
        s = random_samples(other, 1, rng)[0]
        from hemsim.forecaster import ShapeError

        with pytest.raises(ShapeError):
            forward(w, s)

    def test_point_extraction(self):
        rng = np.random.default_rng(4)
        w = init_model(TINY, seed=0)
        fc = forward(w, random_samples(TINY, 1, rng)[0])
        med = fc.point(0.5)
        assert med.shape == (TINY.horizon,)
        np.testing.assert_array_equal(med, fc.values[:, 1])
        with pytest.raises(ValueError):
            fc.point(0.42)


class TestLossAndGradients:
    def test_batch_duplication_invariance(self):
        rng = np.random.default_rng(5)
        w = init_model(TINY, seed=1)
        batch = random_samples(TINY, 2, rng)
        loss1, grads1 = loss_and_gradients(w, batch)
        loss2, grads2 = loss_and_gradients(w, batch + batch)
        assert loss2 == pytest.approx(loss1, rel=1e-12)
        for name in grads1:
            np.testing.assert_allclose(grads2[name], grads1[name], atol=1e-12)

    def test_missing_target_rejected(self):
        rng = np.random.default_rng(6)
        w = init_model(TINY, seed=1)
        with pytest.raises(ValueError):
            loss_and_gradients(w, random_samples(TINY, 1, rng, with_target=False))

    def test_gradients_match_finite_differences_tiny(self):
        rng = np.random.default_rng(7)
        cfg = ModelConfig(
            input_window=8, horizon=2, hidden_size=2, attention_heads=1, dropout=0.0,
            covariates=("qod_sin", "qod_cos"),
        )
        w = init_model(cfg, seed=11)
        batch = random_samples(cfg, 1, rng)
        _, analytic = loss_and_gradients(w, batch)
        numeric = finite_difference_gradients(cfg, w.params, batch)
        err, name = max_relative_error(analytic, numeric)
        assert err < 1e-4, f"worst {err:.2e} at {name}"

    def test_loss_zero_when_heads_hit_target(self):
        # Zero all weights, then set head biases so every quantile output is
        # the constant 0.25; a constant target of 0.25 must give zero loss
        # and zero gradient at the anchor head.
        cfg = ModelConfig(
            input_window=8, horizon=2, hidden_size=2, attention_heads=1,
            dropout=0.0, covariates=("qod_sin",), quantiles=(0.5,),
        )
        w = init_model(cfg, seed=0)
        params = {k: np.zeros_like(v) for k, v in w.params.items()}
        params["vsn_past/ln_gamma"] = w.params["vsn_past/ln_gamma"].copy() * 0
        for k in params:
            if k.endswith("ln_gamma"):
                params[k] = np.ones_like(params[k])
        params["head/median/b"] = np.array([0.25])
        samples = [
            ForecastSample(
                past_target=np.full(8, 0.5),
                past_covariates=np.zeros((8, 1)),
                future_covariates=np.zeros((2, 1)),
                target=np.full(2, 0.25),
            )
        ]
        loss, grads = loss_and_gradients_raw(cfg, params, samples)
        assert loss == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grads["head/median/w"], 0.0, atol=1e-12)


def make_learnable_sets(cfg, n_days_train=20, n_days_val=6, seed=0):
    """Sinusoidal daily load: learnable by construction."""
    from hemsim.datagen import fit_minmax
    rng = np.random.default_rng(seed)
    days = n_days_train + n_days_val + cfg.input_window // STEPS_PER_DAY + 1
    n = days * STEPS_PER_DAY
    q = np.arange(n) % STEPS_PER_DAY
    values = 1.0 + 0.8 * np.sin(2 * np.pi * q / STEPS_PER_DAY) + rng.normal(0, 0.02, size=n)
    series = QuarterSeries(utc(2023, 1, 2), np.maximum(values, 0.0), "kW")
    scaler = fit_minmax(series)
    boundary = (days - n_days_val) * STEPS_PER_DAY
    train_samples = build_training_samples(series, scaler, cfg, (0, boundary))
    val_samples = build_training_samples(series, scaler, cfg, (boundary, n))
    return train_samples, val_samples


SMALL = ModelConfig(input_window=96, horizon=96, hidden_size=4, attention_heads=2, dropout=0.0)


class TestTraining:
    def test_zero_epochs_identity(self):
        w = init_model(TINY, seed=0)
        out, history = train(w, [], [], TrainConfig(initial_lr=0.1, epochs=0, early_stopping_patience=1))
        assert out is w
        assert history == []

    def test_loss_decreases_on_learnable_data(self):
        train_set, val_set = make_learnable_sets(SMALL)
        w = init_model(SMALL, seed=1)
        out, history = train(
            w, train_set, val_set,
            TrainConfig(initial_lr=0.3, epochs=5, batch_size=8, early_stopping_patience=5, seed=2),
        )
        assert history[-1].train_loss < history[0].train_loss
        assert min(r.val_loss for r in history) == pytest.approx(
            evaluate_pinball(SMALL, out.params, val_set), rel=1e-9
        )

    def test_early_stopping_on_noise_validation(self):
        train_set, val_set = make_learnable_sets(SMALL)
        rng = np.random.default_rng(9)
        noise_val = random_samples(SMALL, 4, rng)
        _, history = train(
            w := init_model(SMALL, seed=1),
            train_set,
            noise_val,
            TrainConfig(initial_lr=0.3, epochs=40, batch_size=8, early_stopping_patience=1, seed=3),
        )
        assert len(history) < 40

    def test_history_lr_decays_linearly(self):
        train_set, val_set = make_learnable_sets(SMALL)
        _, history = train(
            init_model(SMALL, seed=1), train_set, val_set,
            TrainConfig(initial_lr=0.4, epochs=4, batch_size=8, early_stopping_patience=4, seed=0),
        )
        lrs = [r.lr for r in history]
        assert lrs == pytest.approx([0.4, 0.3, 0.2, 0.1])

    def test_training_determinism(self):
        train_set, val_set = make_learnable_sets(SMALL)
        cfg = TrainConfig(initial_lr=0.2, epochs=3, batch_size=8, early_stopping_patience=3, seed=7)
        out1, h1 = train(init_model(SMALL, seed=1), train_set, val_set, cfg)
        out2, h2 = train(init_model(SMALL, seed=1), train_set, val_set, cfg)
        assert out1.equal_values(out2)
        assert h1 == h2

    def test_divergence_reported_with_epoch(self):
        train_set, val_set = make_learnable_sets(SMALL)
        poisoned = list(train_set)
        bad_target = poisoned[0].target.copy()
        bad_target[0] = np.inf
        poisoned[0] = ForecastSample(
            past_target=poisoned[0].past_target,
            past_covariates=poisoned[0].past_covariates,
            future_covariates=poisoned[0].future_covariates,
            target=bad_target,
        )
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(
                init_model(SMALL, seed=1), poisoned, val_set,
                TrainConfig(initial_lr=0.1, epochs=2, batch_size=len(poisoned), early_stopping_patience=1),
            )


class TestFinetune:
    def test_zero_lr_is_identity(self):
        train_set, val_set = make_learnable_sets(SMALL)
        w = init_model(SMALL, seed=2)
        out, history = finetune(
            w, train_set, val_set,
            TrainConfig(initial_lr=0.0, epochs=2, batch_size=8, early_stopping_patience=2, seed=0),
        )
        assert out.equal_values(w)
        assert len(history) >= 1

    def test_one_epoch_history(self):
        train_set, val_set = make_learnable_sets(SMALL)
        w = init_model(SMALL, seed=2)
        _, history = finetune(
            w, train_set, val_set,
            TrainConfig(initial_lr=0.05, epochs=1, batch_size=8, early_stopping_patience=1, seed=0),
        )
        assert len(history) == 1

    def test_budget_cap_enforced_against_metadata(self):
        train_set, val_set = make_learnable_sets(SMALL)
        pre_cfg = TrainConfig(initial_lr=0.2, epochs=2, batch_size=8, early_stopping_patience=2, seed=1)
        pre, _ = train(init_model(SMALL, seed=3), train_set, val_set, pre_cfg)
        with pytest.raises(ValueError, match="lr"):
            finetune(pre, train_set, val_set, TrainConfig(initial_lr=0.5, epochs=1, batch_size=8, early_stopping_patience=1))
        with pytest.raises(ValueError, match="epoch"):
            finetune(pre, train_set, val_set, TrainConfig(initial_lr=0.01, epochs=9, batch_size=8, early_stopping_patience=1))

    def test_default_finetune_config(self):
        pre = TrainConfig(initial_lr=0.5, epochs=20, batch_size=16, early_stopping_patience=5, seed=4)
        fcfg = default_finetune_config(pre)
        assert fcfg.initial_lr == pytest.approx(0.05)
        assert fcfg.epochs == 4
        assert fcfg.early_stopping_patience == 3


class TestWindows:
    def test_training_windows_anchor_midnights(self):
        series = QuarterSeries(utc(2023, 1, 2), np.arange(5 * 96, dtype=float), "kW")
        cfg = ModelConfig(input_window=96, horizon=96, hidden_size=4, attention_heads=2)
        scaler = ScalerParams(0.0, 5 * 96.0)
        samples = build_training_samples(series, scaler, cfg)
        assert len(samples) == 4  # targets on days 1..4
        np.testing.assert_allclose(samples[0].target, series.values[96:192] / (5 * 96.0))
        np.testing.assert_allclose(samples[0].past_target, series.values[:96] / (5 * 96.0))

    def test_target_range_filters(self):
        series = QuarterSeries(utc(2023, 1, 2), np.arange(6 * 96, dtype=float), "kW")
        cfg = ModelConfig(input_window=96, horizon=96, hidden_size=4, attention_heads=2)
        scaler = ScalerParams(0.0, 1.0)
        samples = build_training_samples(series, scaler, cfg, (4 * 96, 6 * 96))
        assert len(samples) == 2

    def test_inference_sample_beyond_series_end(self):
        series = QuarterSeries(utc(2023, 1, 2), np.arange(2 * 96, dtype=float), "kW")
        cfg = ModelConfig(input_window=96, horizon=96, hidden_size=4, attention_heads=2)
        s = inference_sample(series, ScalerParams(0.0, 1.0), cfg, utc(2023, 1, 4))
        np.testing.assert_allclose(s.past_target, series.values[96:])
        assert s.target is None

    def test_inference_requires_history(self):
        series = QuarterSeries(utc(2023, 1, 2), np.arange(96, dtype=float), "kW")
        cfg = ModelConfig(input_window=672, horizon=96, hidden_size=4, attention_heads=2)
        with pytest.raises(HistoryError):
            inference_sample(series, ScalerParams(0.0, 1.0), cfg, utc(2023, 1, 3))


class TestWeightsIo:
    def test_round_trip_bitwise(self, tmp_path):
        w = init_model(TINY, seed=9)
        path = tmp_path / "w.hswt"
        save_weights(w, path)
        back = load_weights(path)
        assert back.equal_values(w)
        assert back.rng_seed == w.rng_seed
        assert back.config == w.config
        save_weights(back, tmp_path / "w2.hswt")
        assert (tmp_path / "w2.hswt").read_bytes() == path.read_bytes()

    def test_truncation_detected(self, tmp_path):
        w = init_model(TINY, seed=9)
        path = tmp_path / "w.hswt"
        save_weights(w, path)
        blob = path.read_bytes()
        (tmp_path / "trunc.hswt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(WeightChecksumError):
            load_weights(tmp_path / "trunc.hswt")

    def test_corruption_detected(self, tmp_path):
        w = init_model(TINY, seed=9)
        path = tmp_path / "w.hswt"
        save_weights(w, path)
        blob = bytearray(path.read_bytes())
        blob[50] ^= 0xFF
        (tmp_path / "corrupt.hswt").write_bytes(bytes(blob))
        with pytest.raises(WeightChecksumError):
            load_weights(tmp_path / "corrupt.hswt")

    def test_future_version_refused_cleanly(self, tmp_path):
        w = init_model(TINY, seed=9)
        path = tmp_path / "w.hswt"
        save_weights(w, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # bump version field
        (tmp_path / "v99.hswt").write_bytes(bytes(blob))
        with pytest.raises(WeightVersionError):
            load_weights(tmp_path / "v99.hswt")

    def test_meta_round_trips(self, tmp_path):
        w = init_model(TINY, seed=9)
        from hemsim.forecaster.model import ModelWeights

        w2 = ModelWeights(
            config=w.config, rng_seed=w.rng_seed, params=w.params,
            meta={"train_lr": 0.25, "train_epochs": 12, "household": "house-03"},
        )
        save_weights(w2, tmp_path / "m.hswt")
        back = load_weights(tmp_path / "m.hswt")
        assert back.meta == w2.meta
