"""Training loops, baseline models, and forecast drivers."""

import numpy as np
import pytest

from attnpool.attention import init_single_head, save_checkpoint
from attnpool.forecasting import (
    AttentionPooler,
    FeedForwardNet,
    LinearPooler,
    Standardizer,
    TrainConfig,
    assemble_open_loop,
    attention_hidden_size,
    attention_param_count,
    closed_loop_forecast,
    closed_loop_forecast_batch,
    ffnn_backward,
    ffnn_closed_loop_batch,
    ffnn_forward,
    ffnn_hidden_size,
    fit_linear_ridge,
    gather_histories,
    init_ffnn,
    linear_closed_loop_batch,
    load_model,
    lorenz_candidate_stepper,
    open_loop_forecast,
    required_history,
    save_model,
    train_attention,
    train_ffnn,
    train_linear,
)
from attnpool.lorenz import (
    CANDIDATE_RHOS,
    candidate_forecasts,
    generate_dataset,
    integrate,
    stationary_params,
)
from attnpool.numerics import (
    finite_difference_gradient,
    relative_gradient_error,
    spawn_rng,
)


@pytest.fixture(scope="module")
def small():
    """400-sample training run plus a short validation run, with candidates."""
    ds = generate_dataset(
        seed=3, t_transient=20.0, t_train=40.0, t_val=32.0,
        n_val_segments=2, segment_len=16, warmup=8,
    )
    return ds, candidate_forecasts(ds.train.states), candidate_forecasts(ds.validation.states)


@pytest.fixture(scope="module")
def trained(small):
    ds, cand, _ = small
    data = assemble_open_loop(ds.train.states, cand, 3)
    return train_attention(data, 3, config=TrainConfig(epochs=120, seed=7))


class TestStandardizer:
    def test_zero_mean_unit_scale(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 5.0, size=(200, 4))
        z = Standardizer.fit(x).apply(x)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)

    def test_constant_column_passes_through(self):
        x = np.full((50, 2), 5.0)
        x[:, 1] = np.linspace(0, 1, 50)
        s = Standardizer.fit(x)
        assert s.scale[0] == 1.0
        np.testing.assert_array_equal(s.apply(x)[:, 0], 0.0)

    def test_pools_all_leading_axes(self):
        rng = np.random.default_rng(1)
        keys = rng.normal(size=(10, 3, 4))
        s3 = Standardizer.fit(keys)
        s2 = Standardizer.fit(keys.reshape(-1, 4))
        np.testing.assert_array_equal(s3.mean, s2.mean)
        np.testing.assert_array_equal(s3.scale, s2.scale)

    def test_identity_is_noop(self):
        x = np.random.default_rng(2).normal(size=(5, 3))
        np.testing.assert_array_equal(Standardizer.identity(3).apply(x), x)


class TestSizing:
    def test_hidden_size_rule(self):
        assert [attention_hidden_size(l) for l in range(1, 7)] == [600, 300, 200, 150, 120, 100]

    def test_hidden_size_rejects_zero(self):
        with pytest.raises(ValueError):
            attention_hidden_size(0)

    def test_reference_param_counts(self):
        assert attention_param_count(5) == 3840
        assert ffnn_hidden_size(5) == 202

    def test_ffnn_count_matches_attention_within_10pct(self):
        rng = spawn_rng(0, "sizing")
        for l in range(1, 7):
            net = init_ffnn(rng, ffnn_hidden_size(l), 3 * l, 3)
            target = attention_param_count(l)
            assert abs(net.count() - target) <= 0.1 * target


class TestAssembleOpenLoop:
    def test_matches_naive_assembly(self):
        rng = np.random.default_rng(10)
        states = rng.normal(size=(12, 3))
        cand = rng.normal(size=(12, 4, 3))
        cand[0] = np.nan
        length = 3
        data = assemble_open_loop(states, cand, length)
        np.testing.assert_array_equal(data.target_indices, np.arange(4, 12))
        for row, j in enumerate(data.target_indices):
            query = np.concatenate([states[j - 1 - k] for k in range(length)])
            np.testing.assert_array_equal(data.queries[row], query)
            for m in range(4):
                key = np.concatenate(
                    [cand[j - 1 - k, m] - states[j - 1 - k] for k in range(length)]
                )
                np.testing.assert_array_equal(data.keys[row, m], key)
            np.testing.assert_array_equal(data.values[row], cand[j])
            np.testing.assert_array_equal(data.targets[row], states[j])

    def test_length_one(self):
        rng = np.random.default_rng(11)
        states = rng.normal(size=(5, 3))
        cand = rng.normal(size=(5, 2, 3))
        data = assemble_open_loop(states, cand, 1)
        np.testing.assert_array_equal(data.queries, states[1:4])
        np.testing.assert_array_equal(data.keys, cand[1:4] - states[1:4, None, :])

    def test_rejects_bad_inputs(self):
        states = np.zeros((10, 3))
        cand = np.zeros((10, 2, 3))
        with pytest.raises(ValueError, match="delay length"):
            assemble_open_loop(states, cand, 0)
        with pytest.raises(ValueError, match="no target"):
            assemble_open_loop(states[:4], cand[:4], 3)
        with pytest.raises(ValueError, match="aligned"):
            assemble_open_loop(states, np.zeros((9, 2, 3)), 2)


class TestFeedForwardNet:
    def test_zero_weights_output_is_bias(self):
        net = FeedForwardNet(
            w1=np.zeros((4, 6)), b1=np.zeros(4),
            w2=np.zeros((3, 4)), b2=np.array([1.0, 2.0, 3.0]),
            scaler=Standardizer.identity(6), delay_length=2,
        )
        out, _ = ffnn_forward(net, np.ones((5, 6)))
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_single_and_batch_agree(self):
        net = init_ffnn(spawn_rng(1, "ffnn"), 5, 6, 3)
        x = np.random.default_rng(3).normal(size=6)
        single, _ = ffnn_forward(net, x)
        batch, _ = ffnn_forward(net, x[None])
        np.testing.assert_array_equal(single, batch[0])

    def test_rejects_dim_mismatch(self):
        net = init_ffnn(spawn_rng(1, "ffnn"), 5, 6, 3)
        with pytest.raises(ValueError, match="input dim"):
            ffnn_forward(net, np.zeros((2, 7)))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = FeedForwardNet(
            w1=rng.uniform(-0.5, 0.5, (6, 4)), b1=rng.uniform(-0.5, 0.5, 6),
            w2=rng.uniform(-0.5, 0.5, (3, 6)), b2=rng.uniform(-0.5, 0.5, 3),
            scaler=Standardizer.identity(4), delay_length=1,
        )
        x = rng.uniform(-0.5, 0.5, (4, 4))
        y = rng.uniform(-0.5, 0.5, (4, 3))
        out, cache = ffnn_forward(net, x)
        resid = out - y
        grads, _ = ffnn_backward(net, cache, 2.0 * resid / resid.size)
        for name, analytic in grads.names().items():
            def loss(p, name=name):
                saved = getattr(net, name)
                setattr(net, name, p)
                o, _ = ffnn_forward(net, x)
                setattr(net, name, saved)
                return float(np.mean((o - y) ** 2))
            numeric = finite_difference_gradient(loss, getattr(net, name))
            assert relative_gradient_error(analytic, numeric) < 1e-5, name

    def test_input_gradient(self):
        rng = np.random.default_rng(9)
        net = init_ffnn(spawn_rng(9, "ffnn"), 5, 4, 3)
        x = rng.uniform(-0.5, 0.5, (3, 4))
        out, cache = ffnn_forward(net, x)
        upstream = rng.uniform(-0.5, 0.5, (3, 3))
        _, d_x = ffnn_backward(net, cache, upstream)

        def loss(p):
            o, _ = ffnn_forward(net, p)
            return float(np.sum(o * upstream))

        numeric = finite_difference_gradient(loss, x)
        assert relative_gradient_error(d_x, numeric) < 1e-5


class TestTraining:
    def test_perfect_single_candidate_zero_loss(self, small):
        ds, _, _ = small
        states = ds.train.states[:200]
        cand = states[:, None, :].copy()  # the lone candidate IS the truth
        data = assemble_open_loop(states, cand, 2)
        _, curve = train_attention(data, 2, hidden=8, config=TrainConfig(epochs=50, seed=0))
        assert curve[-1] == 0.0  # softmax over one model pins the weight at 1

    def test_learns_to_select_clean_candidate(self, small):
        ds, _, _ = small
        rng = np.random.default_rng(4)
        states = ds.train.states[:300]
        noisy = states + rng.normal(0.0, 5.0, size=states.shape)
        cand = np.stack([states, noisy], axis=1)
        data = assemble_open_loop(states, cand, 2)
        uniform_mse = np.mean((data.values.mean(axis=1) - data.targets) ** 2)
        _, curve = train_attention(data, 2, hidden=16, config=TrainConfig(epochs=150, seed=1))
        assert curve[-1] < 0.2 * uniform_mse

    def test_loss_curve_improves(self, trained):
        _, curve = trained
        assert curve[-1] < curve[0]

    def test_beats_best_single_candidate(self, small):
        ds, cand, _ = small
        data = assemble_open_loop(ds.train.states, cand, 5)
        _, curve = train_attention(data, 5, config=TrainConfig(epochs=250, seed=5))
        best_single = min(
            float(np.mean((data.values[:, m] - data.targets) ** 2))
            for m in range(data.values.shape[1])
        )
        assert curve[-1] < best_single

    def test_training_is_bitwise_deterministic(self, small):
        ds, cand, _ = small
        data = assemble_open_loop(ds.train.states[:120], cand[:120], 2)
        cfg = TrainConfig(epochs=5, seed=11)
        a, curve_a = train_attention(data, 2, hidden=8, config=cfg)
        b, curve_b = train_attention(data, 2, hidden=8, config=cfg)
        np.testing.assert_array_equal(curve_a, curve_b)
        for name in a.params.names():
            np.testing.assert_array_equal(
                a.params.names()[name], b.params.names()[name]
            )
        np.testing.assert_array_equal(a.query_scaler.mean, b.query_scaler.mean)

    def test_seed_changes_the_fit(self, small):
        ds, cand, _ = small
        data = assemble_open_loop(ds.train.states[:120], cand[:120], 2)
        a, _ = train_attention(data, 2, hidden=8, config=TrainConfig(epochs=5, seed=11))
        b, _ = train_attention(data, 2, hidden=8, config=TrainConfig(epochs=5, seed=12))
        assert not np.array_equal(a.params.w_query, b.params.w_query)

    def test_nonfinite_loss_aborts_with_context(self, small):
        ds, cand, _ = small
        data = assemble_open_loop(ds.train.states[:120], cand[:120], 2)
        data.targets[5] = np.nan
        with pytest.raises(FloatingPointError, match="epoch 0"):
            train_attention(data, 2, hidden=8, config=TrainConfig(epochs=2, seed=0))

    def test_ridge_recovers_generating_weights(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(300, 12))
        weight = rng.uniform(-0.3, 0.3, size=(3, 12))
        bias = rng.uniform(-0.3, 0.3, size=3)
        y = x @ weight.T + bias
        fit = fit_linear_ridge(x, y)
        np.testing.assert_allclose(fit.weight, weight, atol=1e-6)
        np.testing.assert_allclose(fit.bias, bias, atol=1e-6)

    def test_adam_linear_approaches_generating_model(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(300, 6))
        weight = rng.uniform(-0.3, 0.3, size=(3, 6))
        y = x @ weight.T + 0.1
        _, curve = train_linear(x, y, config=TrainConfig(epochs=200, seed=2))
        assert curve[-1] < 0.05 * curve[0]

    def test_ffnn_training_improves(self, small):
        ds, cand, _ = small
        data = assemble_open_loop(ds.train.states[:200], cand[:200], 2)
        _, curve = train_ffnn(
            data.queries, data.targets, 2, hidden=20,
            config=TrainConfig(epochs=30, seed=3),
        )
        assert curve[-1] < curve[0]


class TestOpenLoop:
    def test_weights_sum_to_one(self, trained, small):
        pooler, _ = trained
        ds, _, vcand = small
        fc = open_loop_forecast(pooler, ds.validation.states, vcand)
        np.testing.assert_allclose(fc.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_predictions_in_convex_hull(self, trained, small):
        pooler, _ = trained
        ds, _, vcand = small
        fc = open_loop_forecast(pooler, ds.validation.states, vcand)
        data = assemble_open_loop(ds.validation.states, vcand, pooler.delay_length)
        low = data.values.min(axis=1) - 1e-12
        high = data.values.max(axis=1) + 1e-12
        assert np.all(fc.predictions >= low) and np.all(fc.predictions <= high)

    def test_causality(self, trained, small):
        pooler, _ = trained
        ds, _, vcand = small
        states = ds.validation.states
        fc = open_loop_forecast(pooler, states, vcand)

        cut = 40
        mutated = states.copy()
        mutated[cut:] = np.random.default_rng(8).normal(0.0, 30.0, mutated[cut:].shape)
        fc2 = open_loop_forecast(pooler, mutated, candidate_forecasts(mutated))
        before = fc.target_indices < cut
        np.testing.assert_array_equal(
            fc.predictions[before], fc2.predictions[before]
        )

    def test_beats_uniform_average(self, trained, small):
        pooler, _ = trained
        ds, _, vcand = small
        fc = open_loop_forecast(pooler, ds.validation.states, vcand)
        data = assemble_open_loop(ds.validation.states, vcand, pooler.delay_length)
        mse_att = np.mean((fc.predictions - data.targets) ** 2)
        mse_uniform = np.mean((data.values.mean(axis=1) - data.targets) ** 2)
        assert mse_att < mse_uniform

    def test_linear_path_matches_manual_affine(self, small):
        ds, _, vcand = small
        rng = np.random.default_rng(12)
        model = LinearPooler(weight=rng.normal(size=(3, 33)), bias=rng.normal(size=3))
        fc = open_loop_forecast(model, ds.validation.states, vcand)
        data = assemble_open_loop(ds.validation.states, vcand, 1)
        row = 4
        manual = model.weight @ data.values[row].reshape(-1) + model.bias
        np.testing.assert_allclose(fc.predictions[row], manual, atol=1e-12)
        np.testing.assert_array_equal(fc.target_indices, data.target_indices)

    def test_ffnn_path_needs_no_candidates(self, small):
        ds, _, _ = small
        net = init_ffnn(spawn_rng(5, "olffnn"), 8, 9, 3)
        net.delay_length = 3
        net.scaler = Standardizer.identity(9)
        fc = open_loop_forecast(net, ds.validation.states)
        np.testing.assert_array_equal(
            fc.target_indices, np.arange(4, len(ds.validation.states))
        )
        assert fc.predictions.shape == (len(fc.target_indices), 3)

    def test_pooling_models_require_candidates(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        with pytest.raises(ValueError, match="candidate"):
            open_loop_forecast(pooler, ds.validation.states)


class TestClosedLoop:
    def test_perfect_model_limit_is_exact(self):
        truth = integrate(np.array([1.0, 2.0, 25.0]), 0.0, 40, stationary_params(28.0))
        pooler = AttentionPooler(
            params=init_single_head(spawn_rng(0, "cl"), 8, 9, 9),
            query_scaler=Standardizer.identity(9),
            key_scaler=Standardizer.identity(9),
            delay_length=3,
        )
        hist = gather_histories(truth.states, [6], 4)
        res = closed_loop_forecast_batch(
            pooler, hist, 20, lorenz_candidate_stepper([28.0])
        )
        np.testing.assert_array_equal(res.predictions[0], truth.states[6:26])
        np.testing.assert_array_equal(res.weights[0], 1.0)
        assert res.truncated_at[0] == -1

    @pytest.mark.parametrize("variant", ["additive", "fixed_attention"])
    def test_single_candidate_is_its_autonomous_rollout(self, variant):
        # truth runs at 28 but the lone candidate at 35: the pooled forecast
        # must follow the candidate's own trajectory from the warmup end
        truth = integrate(np.array([0.5, -1.0, 20.0]), 0.0, 20, stationary_params(28.0))
        pooler = AttentionPooler(
            params=init_single_head(spawn_rng(1, "cl"), 8, 6, 6),
            query_scaler=Standardizer.identity(6),
            key_scaler=Standardizer.identity(6),
            delay_length=2,
        )
        hist = gather_histories(truth.states, [5], 3)
        res = closed_loop_forecast_batch(
            pooler, hist, 12, lorenz_candidate_stepper([35.0]), variant=variant
        )
        ref = integrate(truth.states[4], 0.0, 12, stationary_params(35.0))
        np.testing.assert_array_equal(res.predictions[0], ref.states)

    def test_fixed_matches_additive_at_step0_only(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, ds.segment_starts, 4)
        add = closed_loop_forecast_batch(pooler, hist, 16, variant="additive")
        fix = closed_loop_forecast_batch(pooler, hist, 16, variant="fixed_attention")
        np.testing.assert_array_equal(add.predictions[:, 0], fix.predictions[:, 0])
        np.testing.assert_array_equal(add.weights[:, 0], fix.weights[:, 0])
        assert not np.array_equal(add.predictions, fix.predictions)

    def test_best_initial_is_argmax_of_step0_weights(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, ds.segment_starts, 4)
        add = closed_loop_forecast_batch(pooler, hist, 8, variant="additive")
        best = closed_loop_forecast_batch(pooler, hist, 8, variant="best_initial")
        chosen = add.weights[:, 0].argmax(axis=1)
        np.testing.assert_array_equal(best.weights[:, 0].argmax(axis=1), chosen)
        np.testing.assert_allclose(best.weights[:, 0].max(axis=1), 1.0)

    def test_best_initial_equals_chosen_candidate_rollout(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, ds.segment_starts, 4)
        best = closed_loop_forecast_batch(pooler, hist, 10, variant="best_initial")
        for b, weights in enumerate(best.weights[:, 0]):
            rho = CANDIDATE_RHOS[int(weights.argmax())]
            ref = integrate(hist[b, -1], 0.0, 10, stationary_params(rho))
            np.testing.assert_array_equal(best.predictions[b], ref.states)

    def test_autonomous_after_warmup(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        states = ds.validation.states
        start = ds.segment_starts[0]
        res = closed_loop_forecast_batch(
            pooler, gather_histories(states, [start], 4), 16
        )
        mutated = states.copy()
        mutated[start:] = 999.0  # everything from the first target onward
        res2 = closed_loop_forecast_batch(
            pooler, gather_histories(mutated, [start], 4), 16
        )
        np.testing.assert_array_equal(res.predictions, res2.predictions)
        np.testing.assert_array_equal(res.weights, res2.weights)

    def test_blowup_truncates_only_affected_row(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, ds.segment_starts, 4)
        mixed = np.stack([hist[0], hist[1] * 1e155])
        res = closed_loop_forecast_batch(pooler, mixed, 8)
        assert res.truncated_at.tolist() == [-1, 0]
        assert np.isfinite(res.predictions[0]).all()
        assert np.isnan(res.predictions[1]).all()
        assert np.isnan(res.weights[1]).all()

    def test_linear_rollout_truncates_on_explosion(self, small):
        ds, _, _ = small
        model = LinearPooler(weight=np.full((3, 33), 50.0), bias=np.zeros(3))
        hist = gather_histories(ds.validation.states, [ds.segment_starts[0]], 1)
        res = linear_closed_loop_batch(model, hist, 12)
        cut = int(res.truncated_at[0])
        assert cut >= 0
        assert np.isfinite(res.predictions[0, :cut]).all()
        assert np.isnan(res.predictions[0, cut:]).all()

    def test_ffnn_rollout_stays_bounded(self, small):
        ds, _, _ = small
        net = init_ffnn(spawn_rng(2, "clffnn"), 8, 6, 3)
        net.delay_length = 2
        net.scaler = Standardizer.identity(6)
        hist = gather_histories(ds.validation.states, ds.segment_starts, 2)
        res = ffnn_closed_loop_batch(net, hist, 30)
        assert np.isfinite(res.predictions).all()
        assert res.truncated_at.tolist() == [-1, -1]

    def test_single_segment_wrapper(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, [ds.segment_starts[0]], 4)
        batch = closed_loop_forecast_batch(pooler, hist, 8)
        single = closed_loop_forecast(pooler, hist[0], 8)
        np.testing.assert_array_equal(single.predictions, batch.predictions[0])
        np.testing.assert_array_equal(single.weights, batch.weights[0])

    def test_required_history(self, trained):
        pooler, _ = trained
        assert required_history(pooler) == 4
        net = init_ffnn(spawn_rng(2, "rh"), 4, 6, 3)
        net.delay_length = 2
        assert required_history(net) == 2
        assert required_history(LinearPooler(np.zeros((3, 33)), np.zeros(3))) == 1

    def test_gather_histories_slices(self):
        states = np.arange(30.0).reshape(10, 3)
        hist = gather_histories(states, [4, 7], 3)
        np.testing.assert_array_equal(hist[0], states[1:4])
        np.testing.assert_array_equal(hist[1], states[4:7])
        with pytest.raises(ValueError, match="preceding"):
            gather_histories(states, [2], 3)

    def test_rejects_bad_arguments(self, trained, small):
        pooler, _ = trained
        ds, _, _ = small
        hist = gather_histories(ds.validation.states, [ds.segment_starts[0]], 4)
        with pytest.raises(ValueError, match="variant"):
            closed_loop_forecast_batch(pooler, hist, 8, variant="bogus")
        with pytest.raises(ValueError, match="horizon"):
            closed_loop_forecast_batch(pooler, hist, 0)
        with pytest.raises(ValueError, match="histories"):
            closed_loop_forecast_batch(pooler, hist[:, :3], 8)


class TestPersistence:
    def test_attention_round_trip(self, trained, small, tmp_path):
        pooler, _ = trained
        ds, _, vcand = small
        path = tmp_path / "attention.npz"
        save_model(path, pooler)
        back = load_model(path)
        assert back.delay_length == pooler.delay_length
        for name in pooler.params.names():
            np.testing.assert_array_equal(
                back.params.names()[name], pooler.params.names()[name]
            )
        a = open_loop_forecast(pooler, ds.validation.states, vcand)
        b = open_loop_forecast(back, ds.validation.states, vcand)
        np.testing.assert_array_equal(a.predictions, b.predictions)

    def test_linear_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        model = LinearPooler(weight=rng.normal(size=(3, 33)), bias=rng.normal(size=3))
        save_model(tmp_path / "linear.npz", model)
        back = load_model(tmp_path / "linear.npz")
        np.testing.assert_array_equal(back.weight, model.weight)
        np.testing.assert_array_equal(back.bias, model.bias)

    def test_ffnn_round_trip(self, tmp_path):
        net = init_ffnn(spawn_rng(3, "io"), 7, 6, 3)
        net.delay_length = 2
        save_model(tmp_path / "net.npz", net)
        back = load_model(tmp_path / "net.npz")
        x = np.random.default_rng(14).normal(size=(4, 6))
        np.testing.assert_array_equal(back.predict(x), net.predict(x))
        assert back.delay_length == 2

    def test_unknown_kind_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "bad.npz", {"kind": np.array("bogus")})
        with pytest.raises(ValueError, match="bogus"):
            load_model(tmp_path / "bad.npz")

    def test_unknown_model_type_rejected(self, tmp_path):
        with pytest.raises(TypeError):
            save_model(tmp_path / "x.npz", object())
