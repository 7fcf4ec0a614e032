"""scikit-learn style wrappers around the denoiser and the decoders.

Sequences are integer arrays of shape ``(n_samples, seq_len)``. Token ids run
``0 .. vocab_size - 1``; the id ``vocab_size`` marks a masked position.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .diffusion import NoiseSchedule
from .exceptions import ContractError
from .model import Denoiser, DenoiserConfig
from .sampler import BoEConfig, GreedyConfig, boe_decode, greedy_decode
from .training import TrainConfig, monitor_loss, train


def _check_tokens(X, vocab_size: int | None = None, *, allow_mask: bool = True) -> np.ndarray:
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if X.min() < 0:
        raise ContractError("token ids must be >= 0")
    if vocab_size is not None:
        top = vocab_size if allow_mask else vocab_size - 1
        if X.max() > top:
            raise ContractError(f"token id {int(X.max())} outside a vocabulary of {vocab_size}")
    return X


class MaskedDiffusionLM(BaseEstimator):
    """Masked-diffusion denoiser trained on clean token sequences.

    ``vocab_size=None`` infers the vocabulary from the training data.
    ``fit`` stores the trained :class:`Denoiser` as ``model_`` and the
    per-epoch monitoring loss as ``loss_curve_``.
    """

    def __init__(self, vocab_size=None, d_model=32, n_layers=1, n_heads=2, d_hidden=64,
                 time_conditioning="none", positional="learned", tie_output=True,
                 n_steps=16, schedule="linear", epochs=20, batch_size=32, lr=3e-3,
                 clip_norm=1.0, random_state=None):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_hidden = d_hidden
        self.time_conditioning = time_conditioning
        self.positional = positional
        self.tie_output = tie_output
        self.n_steps = n_steps
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _denoiser_config(self, seq_len: int, vocab_size: int) -> DenoiserConfig:
        return DenoiserConfig(seq_len, vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                              n_heads=self.n_heads, d_hidden=self.d_hidden,
                              time_conditioning=self.time_conditioning, positional=self.positional,
                              tie_output=self.tie_output)

    def fit(self, X, y=None):
        X = _check_tokens(X, self.vocab_size, allow_mask=False)
        vocab = int(self.vocab_size) if self.vocab_size is not None else int(X.max()) + 1
        vocab = max(vocab, 2)
        rng = np.random.default_rng(check_random_state(self.random_state).randint(2**31 - 1))
        self.schedule_ = NoiseSchedule(int(self.n_steps), self.schedule)
        init = Denoiser.initialize(self._denoiser_config(X.shape[1], vocab), int(rng.integers(2**31)))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, clip_norm=self.clip_norm)
        self.model_, self.loss_curve_ = train(init, X, self.schedule_, cfg, rng)
        self.vocab_size_ = vocab
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_denoiser(cls, model: Denoiser, n_steps: int = 16, schedule: str = "linear") -> "MaskedDiffusionLM":
        """Wrap an already trained denoiser (e.g. one loaded from a checkpoint)."""
        c = model.config
        est = cls(vocab_size=c.vocab_size, d_model=c.d_model, n_layers=c.n_layers, n_heads=c.n_heads,
                  d_hidden=c.d_hidden, time_conditioning=c.time_conditioning, positional=c.positional,
                  tie_output=c.tie_output, n_steps=n_steps, schedule=schedule)
        est.model_ = model
        est.schedule_ = NoiseSchedule(int(n_steps), schedule)
        est.loss_curve_ = []
        est.vocab_size_ = c.vocab_size
        est.n_features_in_ = c.seq_len
        return est

    def _validate(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_tokens(X, self.vocab_size_)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"X has {X.shape[1]} positions, model was fit on {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Clean-token distributions, shape ``(n_samples, seq_len, vocab_size)``."""
        X = self._validate(X)
        return np.stack([self.model_.predict_proba(row) for row in X])

    def predict(self, X) -> np.ndarray:
        """Fill every masked position with its most likely token in one pass."""
        X = self._validate(X)
        out = X.copy()
        probs = self.predict_proba(X)
        hole = X == self.model_.mask_id
        out[hole] = probs.argmax(axis=2)[hole]
        return out

    def score(self, X, y=None) -> float:
        """Negative mean weighted masked cross-entropy on clean ``X`` (higher is better)."""
        X = self._validate(X)
        if np.any(X == self.model_.mask_id):
            raise ContractError("score expects clean sequences without masked positions")
        rng = np.random.default_rng(0)
        ts = rng.integers(1, self.schedule_.T + 1, size=X.shape[0])
        return -monitor_loss(self.model_, X, ts, self.schedule_, seed=1)


class _SamplerBase(TransformerMixin, BaseEstimator):
    """Completes masked prompts with a fitted :class:`MaskedDiffusionLM`.

    ``transform`` returns the completed sequences and keeps one decode trace
    per row in ``traces_``.
    """

    def fit(self, X=None, y=None):
        if not isinstance(self.lm, MaskedDiffusionLM):
            raise ContractError("lm must be a MaskedDiffusionLM")
        check_is_fitted(self.lm, "model_")
        self._make_config()
        self.model_ = self.lm.model_
        self.n_features_in_ = self.lm.n_features_in_
        return self

    def _decode(self, model, prompt, config, rng):
        raise NotImplementedError

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self.lm._validate(X)
        config = self._make_config()
        rng = np.random.default_rng(check_random_state(self.random_state).randint(2**31 - 1))
        outs, traces = [], []
        for row in X:
            x, trace = self._decode(self.model_, row, config, rng)
            outs.append(x)
            traces.append(trace)
        self.traces_ = traces
        return np.stack(outs) if outs else X.copy()

    def predict(self, X) -> np.ndarray:
        return self.transform(X)


class GreedySampler(_SamplerBase):
    """One forward per step; writes the ``budget`` masked positions ranked highest by ``score``."""

    def __init__(self, lm=None, score="confidence", budget=1, write="argmax", n_steps=None, random_state=None):
        self.lm = lm
        self.score = score
        self.budget = budget
        self.write = write
        self.n_steps = n_steps
        self.random_state = random_state

    def _make_config(self) -> GreedyConfig:
        return GreedyConfig(score=self.score, budget=self.budget, write=self.write)

    def _decode(self, model, prompt, config, rng):
        return greedy_decode(model, prompt, config, rng, T=self.n_steps)


class BoESampler(_SamplerBase):
    """Entropy-gradient steering: two forwards and one backward per step."""

    def __init__(self, lm=None, rho=0.25, budget=1, write="argmax", gating=True, h_max=1.0, lambda_max=1.0,
                 aqa=True, prefilter="confidence", floor="decreasing", n_steps=None, random_state=None):
        self.lm = lm
        self.rho = rho
        self.budget = budget
        self.write = write
        self.gating = gating
        self.h_max = h_max
        self.lambda_max = lambda_max
        self.aqa = aqa
        self.prefilter = prefilter
        self.floor = floor
        self.n_steps = n_steps
        self.random_state = random_state

    def _make_config(self) -> BoEConfig:
        return BoEConfig(rho=self.rho, budget=self.budget, write=self.write, gating=self.gating, h_max=self.h_max,
                         lambda_max=self.lambda_max, aqa=self.aqa, prefilter=self.prefilter, floor=self.floor)

    def _decode(self, model, prompt, config, rng):
        return boe_decode(model, prompt, config, rng, T=self.n_steps)
