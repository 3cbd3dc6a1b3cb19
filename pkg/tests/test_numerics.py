"""Adam updates, finite differences, and seeded init."""

import numpy as np
import pytest

from attnpool.numerics import (
    AdamState,
    adam_step,
    finite_difference_gradient,
    relative_gradient_error,
    spawn_rng,
    uniform_init,
)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        """Zero gradient and zero weight decay leave the parameter untouched,
        whatever the step count says."""
        rng = np.random.default_rng(42)
        p = rng.normal(size=(4, 3))
        state = AdamState.for_param(p)
        state.step_count = 17
        out = adam_step(p, np.zeros_like(p), state, name="w")
        np.testing.assert_array_equal(out, p)
        # and again: moments stay zero, so it stays an identity
        out2 = adam_step(out, np.zeros_like(p), state, name="w")
        np.testing.assert_array_equal(out2, p)

    def test_first_step_magnitude(self):
        # scalar p=1, g=0.5 at defaults: update ~ -lr * g / (sqrt(g^2) + eps)
        state = AdamState.for_param(np.array([1.0]))
        out = adam_step(np.array([1.0]), np.array([0.5]), state)
        np.testing.assert_allclose(out, [0.99900000002], rtol=0, atol=1e-15)

    def test_two_step_recurrence(self):
        """Frozen oracle: the update equations evaluated step by step by hand
        for p0=1 with gradients (1, -1) at default hyperparameters."""
        state = AdamState.for_param(np.array([1.0]))
        p = adam_step(np.array([1.0]), np.array([1.0]), state)
        np.testing.assert_allclose(p, [0.99900000001], rtol=0, atol=1e-15)
        p = adam_step(p, np.array([-1.0]), state)
        np.testing.assert_allclose(p, [0.9990526315884211], rtol=0, atol=1e-15)
        assert state.step_count == 2

    def test_matches_transcribed_recurrence_on_random_stream(self):
        rng = np.random.default_rng(7)
        grads = rng.normal(size=(6, 2, 3))
        p = rng.normal(size=(2, 3))
        state = AdamState.for_param(p, learning_rate=0.01)

        # independent straight-line transcription of the update equations
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        expect = p.copy()
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expect = expect - 0.01 * (m / (1 - 0.9**t)) / (
                np.sqrt(v / (1 - 0.999**t)) + 1e-8
            )

        got = p.copy()
        for g in grads:
            got = adam_step(got, g, state)
        np.testing.assert_allclose(got, expect, rtol=1e-14)

    def test_decoupled_weight_decay(self):
        # with zero gradient, decay must still shrink the parameter directly
        p = np.array([2.0, -2.0])
        state = AdamState.for_param(p, learning_rate=0.1, weight_decay=0.5)
        out = adam_step(p, np.zeros_like(p), state)
        np.testing.assert_allclose(out, p - 0.1 * 0.5 * p, rtol=1e-15)

    def test_non_finite_gradient_names_parameter(self):
        state = AdamState.for_param(np.ones(2))
        with pytest.raises(ValueError, match="w_key"):
            adam_step(np.ones(2), np.array([1.0, np.nan]), state, name="w_key")

    def test_shape_mismatch_rejected(self):
        state = AdamState.for_param(np.ones(3))
        with pytest.raises(ValueError, match="shape"):
            adam_step(np.ones(3), np.ones(4), state)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(3)
            p = rng.normal(size=(5,))
            st = AdamState.for_param(p, learning_rate=0.05, weight_decay=0.01)
            for _ in range(20):
                p = adam_step(p, rng.normal(size=5), st)
            return p

        np.testing.assert_array_equal(run(), run())


class TestFiniteDifference:
    def test_quadratic_is_exact_to_Oh2(self):
        # loss = sum(p^2) has gradient 2p; central differences are exact for
        # quadratics up to roundoff
        p = np.array([[1.0, -2.0], [0.5, 3.0]])
        g = finite_difference_gradient(lambda q: float(np.sum(q**2)), p)
        np.testing.assert_allclose(g, 2 * p, rtol=1e-9, atol=1e-9)

    def test_constant_loss_gives_zero(self):
        g = finite_difference_gradient(lambda q: 1.25, np.ones((2, 3)))
        np.testing.assert_array_equal(g, np.zeros((2, 3)))

    def test_non_finite_loss_raises(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_difference_gradient(lambda q: float("nan"), np.ones(2))

    def test_relative_error_metric(self):
        a = np.array([1.0, 0.0])
        assert relative_gradient_error(a, a) == 0.0
        assert relative_gradient_error(a * 2, a) == pytest.approx(1.0)


class TestInitAndStreams:
    def test_uniform_init_bounds_and_scale(self):
        rng = np.random.default_rng(0)
        w = uniform_init(rng, (200, 50), fan_in=25)
        assert np.all(np.abs(w) <= 0.2)
        assert np.abs(w).max() > 0.15  # actually fills the range

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            uniform_init(np.random.default_rng(0), (2, 2), fan_in=0)

    def test_streams_reproducible_and_independent(self):
        a1 = spawn_rng(11, "train").uniform(size=4)
        a2 = spawn_rng(11, "train").uniform(size=4)
        b = spawn_rng(11, "validation").uniform(size=4)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_streams_differ_across_seeds(self):
        assert not np.array_equal(
            spawn_rng(1, "x").uniform(size=4), spawn_rng(2, "x").uniform(size=4)
        )
