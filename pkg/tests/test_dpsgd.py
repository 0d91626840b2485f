"""DP-SGD tests: clipping, noisy mean, SGD reduction, budget enforcement."""

import numpy as np
import pytest

import dpdistill.dpsgd as dpsgd
from dpdistill.accountant import PrivacyBudget, PrivacyLedger, calibrate_sigma
from dpdistill.corpus import PreparedExample
from dpdistill.dpsgd import (
    DpSgdConfig,
    clip_gradient,
    dp_sgd_step,
    noisy_mean,
    steps_for_epochs,
    train_dp,
)
from dpdistill.errors import BudgetExhaustedError
from dpdistill.model import (
    ModelConfig,
    NextTokenLoss,
    batch_examples,
    init_params,
    mean_gradients,
)

SMALL = ModelConfig(
    n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=13, max_seq_len=16
)


def make_examples(rng: np.random.Generator, n: int, t: int = 10):
    out = []
    for _ in range(n):
        tokens = tuple(int(x) for x in rng.integers(3, SMALL.vocab_size, size=t))
        out.append(PreparedExample(tokens=tokens, boundary=2))
    return out


def config(**kw) -> DpSgdConfig:
    base = dict(
        clip_norm=1.0,
        noise_multiplier=0.0,
        sampling_rate=1.0,
        expected_batch=4.0,
        n_steps=1,
        learning_rate=0.1,
    )
    base.update(kw)
    return DpSgdConfig(**base)


class TestClip:
    def test_norm_two_halved(self):
        g = np.array([1.2, 1.6])
        np.testing.assert_allclose(clip_gradient(g, 1.0), g / 2, rtol=1e-15)

    def test_below_threshold_unchanged(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip_gradient(g, 1.0), g)

    def test_zero_vector(self):
        g = np.zeros(5)
        np.testing.assert_array_equal(clip_gradient(g, 1.0), g)

    def test_output_norm_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = rng.standard_normal(40) * rng.uniform(0.1, 10)
            assert np.linalg.norm(clip_gradient(g, 1.0)) <= 1.0 + 1e-12


class TestNoisyMean:
    def test_noiseless_exact_mean(self):
        rows = np.array([[1.0, 0.0], [0.0, 0.6]])
        out = noisy_mean(rows, 1.0, 0.0, 2.0, np.random.default_rng(0))
        np.testing.assert_allclose(out, rows.sum(axis=0) / 2.0, rtol=1e-15)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(42)
        zero = np.zeros((1, 10_000))
        out = noisy_mean(zero, 1.0, 1.0, 4.0, rng)
        scaled = out * 4.0
        assert abs(scaled.mean()) < 0.05
        assert abs(scaled.var() - 1.0) < 0.1

    def test_fixed_seed_deterministic(self):
        rows = np.ones((2, 8)) * 0.1
        a = noisy_mean(rows, 1.0, 0.5, 2.0, np.random.default_rng(7))
        b = noisy_mean(rows, 1.0, 0.5, 2.0, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_zero_denominator_rejected(self):
        with pytest.raises(ValueError, match="denominator"):
            noisy_mean(np.ones((1, 2)), 1.0, 0.0, 0.0, np.random.default_rng(0))

    def test_overnorm_input_rejected(self):
        with pytest.raises(ValueError, match="exceeds clip_norm"):
            noisy_mean(np.full((1, 4), 5.0), 1.0, 0.0, 1.0, np.random.default_rng(0))


class TestStep:
    def test_noiseless_unclipped_equals_plain_sgd(self):
        rng = np.random.default_rng(3)
        examples = make_examples(rng, 4)
        batch = batch_examples(examples, pad_id=0)
        lr = 0.25

        params_dp = init_params(SMALL, seed=1)
        cfg = config(clip_norm=1e9, learning_rate=lr, expected_batch=4.0)
        dp_sgd_step(params_dp, batch, cfg, np.random.default_rng(0))

        params_ref = init_params(SMALL, seed=1)
        _, grad, _ = mean_gradients(params_ref, batch, NextTokenLoss())
        params_ref.add_flat(grad, scale=-lr)

        np.testing.assert_allclose(
            params_dp.flatten(), params_ref.flatten(), rtol=0, atol=1e-12
        )

    def test_zero_learning_rate_no_change(self):
        rng = np.random.default_rng(3)
        examples = make_examples(rng, 4)
        params = init_params(SMALL, seed=1)
        before = params.flatten()
        dp_sgd_step(
            params, batch_examples(examples, 0),
            config(noise_multiplier=1.0, learning_rate=0.0),
            np.random.default_rng(0),
        )
        np.testing.assert_array_equal(params.flatten(), before)

    def test_deterministic(self):
        examples = make_examples(np.random.default_rng(5), 3)
        batch = batch_examples(examples, 0)
        cfg = config(noise_multiplier=0.7)
        a = init_params(SMALL, seed=2)
        b = init_params(SMALL, seed=2)
        dp_sgd_step(a, batch, cfg, np.random.default_rng(9))
        dp_sgd_step(b, batch, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a.flatten(), b.flatten())

    def test_chunked_batch_matches_plain_sgd(self):
        # Batch larger than PER_EXAMPLE_CHUNK exercises the chunked sum path.
        import dpdistill.dpsgd as dpsgd_mod

        rng = np.random.default_rng(21)
        examples = make_examples(rng, dpsgd_mod.PER_EXAMPLE_CHUNK + 9)
        batch = batch_examples(examples, pad_id=0)
        n = len(examples)
        lr = 0.1

        params_dp = init_params(SMALL, seed=6)
        cfg = config(clip_norm=1e9, learning_rate=lr, expected_batch=float(n))
        dp_sgd_step(params_dp, batch, cfg, np.random.default_rng(0))

        params_ref = init_params(SMALL, seed=6)
        _, grad, _ = mean_gradients(params_ref, batch, NextTokenLoss())
        params_ref.add_flat(grad, scale=-lr)

        np.testing.assert_allclose(
            params_dp.flatten(), params_ref.flatten(), rtol=0, atol=1e-12
        )

    def test_fifty_step_trajectory_reduction(self):
        rng = np.random.default_rng(11)
        examples = make_examples(rng, 12)
        batch_rng = np.random.default_rng(13)
        batches = [
            batch_examples([examples[i] for i in batch_rng.integers(0, 12, size=6)], 0)
            for _ in range(50)
        ]
        lr = 0.05

        params_dp = init_params(SMALL, seed=4)
        cfg = config(clip_norm=1e9, learning_rate=lr, expected_batch=6.0)
        for batch in batches:
            dp_sgd_step(params_dp, batch, cfg, np.random.default_rng(0))

        params_ref = init_params(SMALL, seed=4)
        for batch in batches:
            _, grad, _ = mean_gradients(params_ref, batch, NextTokenLoss())
            params_ref.add_flat(grad, scale=-lr)

        np.testing.assert_allclose(
            params_dp.flatten(), params_ref.flatten(), rtol=0, atol=1e-12
        )


class TestTrainDp:
    def ledger(self, eps=2.0, delta=1e-4):
        return PrivacyLedger(target=PrivacyBudget(eps, delta))

    def test_zero_steps_identity(self):
        examples = make_examples(np.random.default_rng(1), 8)
        params = init_params(SMALL, seed=3)
        before = params.flatten()
        ledger = self.ledger()
        report = train_dp(
            params, examples,
            config(noise_multiplier=1.0, sampling_rate=0.5, n_steps=0),
            ledger, np.random.default_rng(0),
        )
        np.testing.assert_array_equal(report.params.flatten(), before)
        assert report.spent_epsilon == 0.0
        assert ledger.steps_recorded == 0

    def test_budget_exhaustion_names_step(self):
        examples = make_examples(np.random.default_rng(1), 8)
        params = init_params(SMALL, seed=3)
        cfg = config(
            noise_multiplier=0.5, sampling_rate=0.5, expected_batch=4.0, n_steps=500
        )
        with pytest.raises(BudgetExhaustedError, match="step") as err:
            train_dp(params, examples, cfg, self.ledger(eps=1.0), np.random.default_rng(0))
        assert err.value.step < 500

    def test_spent_epsilon_monotone_per_step(self):
        examples = make_examples(np.random.default_rng(1), 8)
        params = init_params(SMALL, seed=3)
        ledger = self.ledger(eps=8.0)
        seen = []
        train_dp(
            params, examples,
            config(noise_multiplier=2.0, sampling_rate=0.5, expected_batch=4.0, n_steps=10),
            ledger, np.random.default_rng(0),
            step_callback=lambda step, info: seen.append(ledger.spent_epsilon()),
        )
        assert len(seen) == 10
        assert all(a <= b + 1e-12 for a, b in zip(seen, seen[1:]))
        assert seen[-1] <= 8.0 + 1e-6

    def test_deterministic_reports(self):
        examples = make_examples(np.random.default_rng(1), 10)
        cfg = config(
            noise_multiplier=2.0, sampling_rate=0.2, expected_batch=2.0, n_steps=8
        )
        runs = []
        for _ in range(2):
            params = init_params(SMALL, seed=6)
            report = train_dp(
                params, examples, cfg, self.ledger(eps=4.0), np.random.default_rng(21)
            )
            runs.append(report)
        assert runs[0].losses == runs[1].losses
        assert runs[0].batch_sizes == runs[1].batch_sizes
        assert runs[0].spent_epsilon == runs[1].spent_epsilon
        np.testing.assert_array_equal(
            runs[0].params.flatten(), runs[1].params.flatten()
        )

    def test_clip_invariant_under_flag(self):
        examples = make_examples(np.random.default_rng(1), 10)
        params = init_params(SMALL, seed=6)
        old = dpsgd.STRICT_CLIP_CHECK
        dpsgd.STRICT_CLIP_CHECK = True
        try:
            report = train_dp(
                params, examples,
                config(
                    clip_norm=0.05, noise_multiplier=2.0, sampling_rate=0.2,
                    expected_batch=2.0, n_steps=5,
                ),
                self.ledger(eps=4.0), np.random.default_rng(2),
            )
        finally:
            dpsgd.STRICT_CLIP_CHECK = old
        assert report.max_postclip_norm <= 0.05 + 1e-9

    def test_toy_loss_decreases_under_calibrated_noise(self):
        rng = np.random.default_rng(31)
        examples = make_examples(rng, 2000, t=12)
        n_steps = 60
        sigma = calibrate_sigma(
            PrivacyBudget.for_dataset(2.0, 2000), q=0.05, n_steps=n_steps
        )
        cfg = DpSgdConfig.for_dataset(
            n_records=2000,
            sampling_rate=0.05,
            clip_norm=1.0,
            noise_multiplier=sigma,
            n_steps=n_steps,
            learning_rate=0.3,
        )
        params = init_params(SMALL, seed=8)
        ledger = PrivacyLedger(target=PrivacyBudget.for_dataset(2.0, 2000))
        report = train_dp(params, examples, cfg, ledger, np.random.default_rng(17))
        first = np.mean([l for l in report.losses[:5] if l is not None])
        last = np.mean([l for l in report.losses[-5:] if l is not None])
        assert last < first
        assert report.spent_epsilon <= 2.0 + 1e-6


class TestSchedule:
    def test_steps_for_epochs(self):
        assert steps_for_epochs(10, 0.05) == 200
        assert steps_for_epochs(1, 1.0) == 1
        assert steps_for_epochs(0.01, 0.5) == 1

    def test_config_validation(self):
        with pytest.raises(ValueError, match="clip_norm"):
            config(clip_norm=0.0)
        with pytest.raises(ValueError, match="sampling_rate"):
            config(sampling_rate=1.5)
