import math

import numpy as np
import pytest

from boelab import autodiff as ad
from boelab.autodiff import RowMask, Tape, Tensor
from boelab.checkpoint import FORMAT_VERSION, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from boelab.diffusion import NoiseSchedule
from boelab.exceptions import (BadMagicError, ChecksumError, ContractError, DivergenceError, TruncatedError,
                               VersionError)
from boelab.model import Denoiser, DenoiserConfig, entropy_readout, init_params
from boelab.tasks import TaskSpec, generate
from boelab.training import TrainConfig, prompted_cross_entropy, train

SMALL = DenoiserConfig(8, 6, d_model=16, n_layers=1, n_heads=2, d_hidden=16)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ContractError):
            DenoiserConfig(8, 6, d_model=10, n_heads=4)

    @pytest.mark.parametrize("field", ["seq_len", "d_model", "n_layers", "n_heads", "d_hidden"])
    def test_counts_positive(self, field):
        kwargs = dict(seq_len=8, vocab_size=6, d_model=16, n_heads=2)
        kwargs[field] = 0
        with pytest.raises(ContractError):
            DenoiserConfig(**kwargs)

    def test_embedding_has_mask_row(self):
        assert init_params(SMALL, 0)["tok_emb"].shape == (7, 16)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(SMALL, 7), init_params(SMALL, 7)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_different_seeds_differ(self):
        a, b = init_params(SMALL, 7), init_params(SMALL, 8)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_logits_small_at_init(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            model = Denoiser.initialize(DenoiserConfig(16, 16, n_layers=2), seed)
            tokens = rng.integers(0, 17, size=16)
            assert np.abs(model.logits(tokens)).max() < 5


class TestSoftWrite:
    def test_one_hot_gives_row(self, tiny_model):
        np.testing.assert_array_equal(tiny_model.soft_embedding(np.eye(6)[2]), tiny_model.embedding_table[2])

    def test_uniform_over_two_is_midpoint(self):
        model = Denoiser.initialize(DenoiserConfig(4, 2, d_model=8), 1)
        e = model.embedding_table.astype(np.float64)
        np.testing.assert_allclose(model.soft_embedding([0.5, 0.5]), (e[0] + e[1]) / 2, rtol=1e-6)

    def test_delta_is_offset_from_mask(self, tiny_model):
        pi = np.full(6, 1 / 6)
        np.testing.assert_allclose(tiny_model.delta(pi), tiny_model.soft_embedding(pi) - tiny_model.mask_embedding)

    def test_unnormalized_rejected(self, tiny_model):
        with pytest.raises(ContractError):
            tiny_model.soft_embedding(np.full(6, 0.5))

    def test_is_a_constant(self, tiny_model):
        # the soft write enters the tape as a plain array, so nothing upstream of pi is recorded
        tape = Tape()
        tokens = np.array([6, 1, 6, 2, 3, 6, 0, 6])
        x = tiny_model.embed(tokens, {0: tiny_model.soft_embedding(np.full(6, 1 / 6))})
        assert isinstance(x, np.ndarray)
        n_before = len(tape)
        tiny_model.readout(tape, tape.leaf(x), [2, 5])
        assert len(tape) > n_before


class TestForward:
    def test_distributions_normalized(self, tiny_model):
        p = tiny_model.predict_proba(np.array([6, 0, 6, 6, 1, 2, 6, 3]))
        assert p.shape == (8, 6)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_injection_at_unmasked_rejected(self, tiny_model):
        with pytest.raises(ContractError):
            tiny_model.embed(np.array([6, 0, 6, 6, 1, 2, 6, 3]), {1: np.zeros(16, np.float32)})

    def test_permutation_equivariance_without_positions(self):
        model = Denoiser.initialize(DenoiserConfig(8, 6, d_model=16, n_heads=2, positional="none"), 2)
        tokens = np.array([6, 0, 6, 6, 1, 2, 6, 3])
        perm = np.random.default_rng(0).permutation(8)
        np.testing.assert_allclose(model.logits(tokens)[perm], model.logits(tokens[perm]), atol=1e-5)

    def test_batched_forward_matches_single(self, tiny_model):
        rows = np.array([[6, 0, 6, 6, 1, 2, 6, 3], [1, 6, 6, 2, 6, 6, 0, 6]])
        batched = tiny_model.logits(rows)
        for k, row in enumerate(rows):
            np.testing.assert_allclose(batched[k * 8 : (k + 1) * 8], tiny_model.logits(row), atol=1e-5)

    def test_time_conditioning_changes_output(self):
        model = Denoiser.initialize(DenoiserConfig(4, 4, d_model=8, time_conditioning="scalar"), 0)
        model.params["time_emb"][:] = 1.0
        tokens = np.array([4, 4, 1, 4])
        assert not np.array_equal(model.logits(tokens, t=0.1), model.logits(tokens, t=0.9))


def _embed_grad(model, tokens, rows, active):
    tape = Tape(np.float64)
    x = tape.leaf(model.embed(tokens))
    root = model.readout(tape, x, rows, active=active)
    return root.data, ad.backward(root)[x]


class TestActiveQuery:
    tokens = np.array([6, 0, 6, 6, 1, 2, 6, 6])

    def test_forward_bitwise_identical(self, tiny_model):
        tape = Tape()
        x = Tensor(tiny_model.embed(self.tokens))
        dense = tiny_model.forward(tape, x).data
        for active in ([0], [2, 3], []):
            sparse = tiny_model.forward(Tape(), x, active=RowMask(active, 8)).data
            assert np.array_equal(dense, sparse)

    def test_all_rows_match_dense_gradient(self, tiny_model):
        rows = np.flatnonzero(self.tokens == 6)
        _, dense = _embed_grad(tiny_model, self.tokens, rows, None)
        _, full = _embed_grad(tiny_model, self.tokens, rows, RowMask.all(8))
        assert np.array_equal(dense, full)

    def test_locality_single_layer(self, tiny_model):
        rows = np.array([0, 2])
        active = RowMask([3, 6], 8)
        _, g = _embed_grad(tiny_model, self.tokens, rows, active)
        # positions outside both the readout rows and the active set get nothing
        for p in set(range(8)) - {0, 2, 3, 6}:
            assert not np.any(g[p])
        assert np.any(g[0]) and np.any(g[2])


class TestEntropyReadout:
    def test_uniform_four(self):
        out = entropy_readout(Tape().leaf(np.zeros((1, 4))), [0])
        assert float(out.data) == pytest.approx(math.log(4), abs=1e-6)

    def test_one_hot_is_zero(self):
        z = np.full((2, 4), -1e4)
        z[:, 1] = 0
        assert float(entropy_readout(Tape(np.float64).leaf(z), [0, 1]).data) == pytest.approx(0, abs=1e-12)

    def test_additive(self):
        z = np.random.default_rng(0).normal(size=(3, 5))
        parts = [float(entropy_readout(Tape(np.float64).leaf(z), [i]).data) for i in (0, 2)]
        both = float(entropy_readout(Tape(np.float64).leaf(z), [0, 2]).data)
        assert both == pytest.approx(sum(parts), rel=1e-12)

    def test_empty_is_zero(self):
        assert float(entropy_readout(Tape().leaf(np.zeros((2, 3))), []).data) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            entropy_readout(Tape().leaf(np.zeros((2, 3))), [2])


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "m.estr")
        loaded = load_checkpoint(path)
        assert loaded.config == tiny_model.config
        assert all(np.array_equal(loaded.params[k], v) for k, v in tiny_model.params.items())

    def test_header_records_loss_weight(self, tiny_model):
        _, header = from_bytes(to_bytes(tiny_model))
        assert float(header["loss_weight_constant"]) == 1.0

    def test_corrupted_byte(self, tiny_model):
        blob = bytearray(to_bytes(tiny_model))
        blob[len(blob) // 2] ^= 0x40
        with pytest.raises(ChecksumError):
            from_bytes(bytes(blob))

    def test_other_version(self, tiny_model):
        blob = bytearray(to_bytes(tiny_model))
        blob[4:6] = (FORMAT_VERSION + 1).to_bytes(2, "little")
        with pytest.raises(VersionError):
            from_bytes(bytes(blob))

    def test_truncated(self, tiny_model):
        with pytest.raises(TruncatedError):
            from_bytes(to_bytes(tiny_model)[:-100])

    def test_bad_magic(self, tiny_model):
        with pytest.raises(BadMagicError):
            from_bytes(b"NOPE" + to_bytes(tiny_model)[4:])


class TestTraining:
    data = generate(TaskSpec("copy", 8, 6), 64, seed=0).tokens

    def test_zero_lr_constant_curve(self, tiny_model):
        _, curve = train(tiny_model, self.data, NoiseSchedule(8), TrainConfig(epochs=3, batch_size=16, lr=0.0),
                         np.random.default_rng(0))
        assert curve[0] == curve[1] == curve[2]

    def test_same_seed_same_curve(self, tiny_model):
        cfg = TrainConfig(epochs=2, batch_size=16)
        a = train(tiny_model, self.data, NoiseSchedule(8), cfg, np.random.default_rng(4))
        b = train(tiny_model, self.data, NoiseSchedule(8), cfg, np.random.default_rng(4))
        assert a[1] == b[1]
        assert all(np.array_equal(a[0].params[k], b[0].params[k]) for k in a[0].params)

    def test_input_untouched(self, tiny_model):
        before = {k: v.copy() for k, v in tiny_model.params.items()}
        train(tiny_model, self.data, NoiseSchedule(8), TrainConfig(epochs=1, batch_size=16), np.random.default_rng(0))
        assert all(np.array_equal(before[k], tiny_model.params[k]) for k in before)

    def test_divergence_reported(self, tiny_model):
        broken = Denoiser(tiny_model.config, {k: v.copy() for k, v in tiny_model.params.items()})
        broken.params["out_b"][0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(broken, self.data, NoiseSchedule(8), TrainConfig(epochs=1, batch_size=16), np.random.default_rng(0))

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(ContractError):
            train(tiny_model, np.zeros((0, 8)), NoiseSchedule(8), TrainConfig(), np.random.default_rng(0))

    @pytest.mark.slow
    def test_copy_task_learned(self):
        spec = TaskSpec("copy", 16, 16)
        data = generate(spec, 4096, seed=1)
        init = Denoiser.initialize(DenoiserConfig(16, 16, d_model=32, n_layers=2, n_heads=2, d_hidden=64), 0)
        model, curve = train(init, data.tokens, NoiseSchedule(16), TrainConfig(epochs=6, batch_size=64, lr=3e-3),
                             np.random.default_rng(1))
        assert curve[-1] < curve[0]
        held_out = generate(spec, 256, seed=99)
        assert prompted_cross_entropy(model, held_out.tokens, held_out.prompt_mask) < 0.1
