import math

import numpy as np
import pytest

import boelab.diffusion as diff
from boelab import autodiff as ad
from boelab.diffusion import (NoiseSchedule, Vocabulary, alpha_at, elbo_loss, forward_mask, mask_tokens,
                              reverse_kernel, true_posterior)
from boelab.exceptions import ContractError, DegenerateScheduleError
from boelab.model import Denoiser, DenoiserConfig

V = Vocabulary(4)


class TestSchedule:
    def test_linear_endpoints(self):
        s = NoiseSchedule(8)
        assert alpha_at(s, 0) == 1.0
        assert alpha_at(s, 8) == 0.0

    def test_cosine_midpoint(self):
        assert alpha_at(NoiseSchedule(8, "cosine"), 4) == pytest.approx(math.cos(math.pi / 4), abs=1e-12)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_non_increasing(self, kind):
        s = NoiseSchedule(32, kind)
        a = [alpha_at(s, t) for t in range(33)]
        assert all(x >= y for x, y in zip(a, a[1:]))

    @pytest.mark.parametrize("t", [-1, 9])
    def test_out_of_range(self, t):
        with pytest.raises(ContractError):
            alpha_at(NoiseSchedule(8), t)

    def test_loss_weight_linear(self):
        # (alpha_{t-1} - alpha_t) / (1 - alpha_t) = 1/t for the linear schedule
        s = NoiseSchedule(10)
        for t in range(1, 11):
            assert s.weight(t) == pytest.approx(1 / t)

    def test_bad_schedule(self):
        with pytest.raises(ContractError):
            NoiseSchedule(0)
        with pytest.raises(ContractError):
            NoiseSchedule(4, "sqrt")


class TestForwardMask:
    def test_alpha_one_keeps_everything(self):
        x0 = np.arange(10) % 4
        out = mask_tokens(x0, 1.0, np.random.default_rng(0), 4)
        np.testing.assert_array_equal(out, x0)

    def test_alpha_zero_masks_everything(self):
        out = forward_mask(np.arange(10) % 4, 8, NoiseSchedule(8), np.random.default_rng(0), 4)
        assert np.all(out.tokens == 4)
        np.testing.assert_array_equal(out.mask_set, np.arange(10))

    def test_half_masked_fraction(self):
        x0 = np.zeros(10_000, dtype=np.int64)
        for seed in range(50):
            frac = np.mean(mask_tokens(x0, 0.5, np.random.default_rng(seed), 4) == 4)
            assert abs(frac - 0.5) <= 0.02

    def test_mask_in_input_rejected(self):
        with pytest.raises(ContractError):
            forward_mask(np.array([0, 4]), 1, NoiseSchedule(4), np.random.default_rng(0), 4)


class TestPosterior:
    def test_unmasked_is_point_mass(self):
        p = true_posterior(2, 2, 3, NoiseSchedule(8), V)
        np.testing.assert_array_equal(p, [0, 0, 1, 0, 0])

    def test_reveal_certain_when_previous_alpha_is_one(self):
        p = true_posterior(V.mask_id, 1, 1, NoiseSchedule(8), V)
        np.testing.assert_array_equal(p, [0, 1, 0, 0, 0])

    def test_stays_masked_when_alpha_flat(self, monkeypatch):
        monkeypatch.setattr(diff, "alpha_at", lambda s, t: 0.5)
        p = true_posterior(V.mask_id, 1, 3, NoiseSchedule(8), V)
        np.testing.assert_array_equal(p, [0, 0, 0, 0, 1])

    def test_degenerate_schedule(self, monkeypatch):
        monkeypatch.setattr(diff, "alpha_at", lambda s, t: 1.0)
        with pytest.raises(DegenerateScheduleError):
            true_posterior(V.mask_id, 1, 3, NoiseSchedule(8), V)

    def test_kernel_uniform_at_first_step(self):
        p = reverse_kernel(V.mask_id, np.full(4, 0.25), 1, NoiseSchedule(8), V)
        np.testing.assert_allclose(p, [0.25, 0.25, 0.25, 0.25, 0.0])

    def test_kernel_normalized(self):
        rng = np.random.default_rng(0)
        for t in range(1, 9):
            p = reverse_kernel(V.mask_id, rng.dirichlet(np.ones(4)), t, NoiseSchedule(8, "cosine"), V)
            assert abs(p.sum() - 1) <= 1e-6

    def test_unnormalized_rejected(self):
        with pytest.raises(ContractError):
            reverse_kernel(V.mask_id, np.array([0.5, 0.5, 0.5, 0.0]), 2, NoiseSchedule(8), V)

    def test_kernel_equals_posterior_for_one_hot(self):
        s = NoiseSchedule(8)
        for t in range(1, 9):
            for x0 in range(4):
                onehot = np.eye(4)[x0]
                for xt in (x0, V.mask_id):
                    assert np.array_equal(reverse_kernel(xt, onehot, t, s, V), true_posterior(xt, x0, t, s, V))


class _Oracle:
    """Predicts the clean sequence with overwhelming logits."""

    def __init__(self, x0, vocab):
        self.x0 = np.atleast_2d(x0)
        self.vocab_size = vocab
        self.mask_id = vocab

    def bind(self, tape, trainable):
        return {}

    def forward_tokens(self, tape, xt, *, t=None, params=None):
        z = np.full((self.x0.size, self.vocab_size), -1e4, dtype=tape.dtype)
        z[np.arange(self.x0.size), self.x0.reshape(-1)] = 0.0
        return tape.leaf(z)


class TestLoss:
    def test_zero_when_alpha_near_one(self):
        model = Denoiser.initialize(DenoiserConfig(6, 4, d_model=8, n_heads=2, d_hidden=8), 0)
        x0 = np.array([0, 1, 2, 3, 0, 1])
        # alpha_1 = 1 - 1e-6, so nothing gets masked for this seed
        loss, stats = elbo_loss(model, x0, 1, NoiseSchedule(1_000_000), np.random.default_rng(0), return_stats=True)
        assert stats["masked"] == 0
        assert float(loss.data) == 0.0

    def test_perfect_predictor_zero_loss(self):
        x0 = np.array([[0, 3, 1, 2]])
        loss = elbo_loss(_Oracle(x0, 4), x0, 4, NoiseSchedule(4), np.random.default_rng(0))
        assert float(loss.data) == 0.0

    def test_random_init_near_uniform(self):
        model = Denoiser.initialize(DenoiserConfig(16, 16), 0)
        rng = np.random.default_rng(1)
        x0 = rng.integers(0, 16, size=(64, 16))
        _, stats = elbo_loss(model, x0, 16, NoiseSchedule(16), rng, return_stats=True)
        assert abs(stats["ce_sum"] / stats["masked"] - math.log(16)) < 0.3

    def test_differentiable(self):
        model = Denoiser.initialize(DenoiserConfig(6, 4, d_model=8, n_heads=2, d_hidden=8), 0)
        tape = ad.Tape()
        leaves = model.bind(tape, trainable=True)
        loss = elbo_loss(model, np.array([[0, 1, 2, 3, 0, 1]]), 6, NoiseSchedule(6), np.random.default_rng(0),
                         tape=tape, params=leaves)
        grads = ad.backward(loss)
        assert np.any(grads[leaves["tok_emb"]])
