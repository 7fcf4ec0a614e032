"""Absorbing-mask forward corruption, reverse kernels and the training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, DegenerateScheduleError

NORMALIZATION_ATOL = 1e-5
# The loss weight is only fixed up to a constant; we take the constant to be 1.
LOSS_WEIGHT_CONSTANT = 1.0


@dataclass(frozen=True)
class Vocabulary:
    """``size`` data tokens ``0..size-1``; MASK is the extra id ``size``."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ContractError(f"vocabulary needs at least 2 data tokens, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str = "linear"

    def __post_init__(self):
        if self.T < 1:
            raise ContractError(f"schedule needs T >= 1, got {self.T}")
        if self.kind not in ("linear", "cosine"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: int) -> float:
        return alpha_at(self, t)

    def weight(self, t: int) -> float:
        """Loss weight ``(alpha_{t-1} - alpha_t) / (1 - alpha_t)`` for ``t >= 1``."""
        if not 1 <= t <= self.T:
            raise ContractError(f"loss weight needs 1 <= t <= {self.T}, got {t}")
        a_prev, a_t = self.alpha(t - 1), self.alpha(t)
        if a_t >= 1.0:
            raise DegenerateScheduleError(f"alpha_{t} = 1 leaves the loss weight undefined")
        return LOSS_WEIGHT_CONSTANT * (a_prev - a_t) / (1.0 - a_t)


def alpha_at(schedule: NoiseSchedule, t: int) -> float:
    """Keep probability at step ``t``: ``1 - t/T`` (linear) or ``cos(pi t / 2T)``."""
    if not 0 <= t <= schedule.T:
        raise ContractError(f"t={t} outside [0, {schedule.T}]")
    if t == 0:
        return 1.0
    if t == schedule.T:
        return 0.0
    if schedule.kind == "linear":
        return 1.0 - t / schedule.T
    return math.cos(math.pi * t / (2 * schedule.T))


@dataclass(frozen=True)
class MaskedSequence:
    tokens: np.ndarray
    mask_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))

    @property
    def mask_set(self) -> np.ndarray:
        return np.flatnonzero(self.tokens == self.mask_id)

    def __len__(self):
        return int(self.tokens.size)


def mask_tokens(x0, alpha: float, rng: np.random.Generator, mask_id: int, maskable=None) -> np.ndarray:
    """Vectorised corruption: each (maskable) entry of ``x0`` becomes MASK w.p. ``1 - alpha``.

    ``alpha`` may be an array broadcastable against ``x0`` (one value per row).
    """
    x0 = np.asarray(x0, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim:
        alpha = alpha[..., None]
    drop = rng.random(x0.shape) >= alpha
    if maskable is not None:
        drop &= np.asarray(maskable, dtype=bool)
    return np.where(drop, mask_id, x0)


def forward_mask(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator, mask_id: int) -> MaskedSequence:
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == mask_id):
        raise ContractError("forward_mask: x0 already contains MASK")
    return MaskedSequence(mask_tokens(x0, alpha_at(schedule, t), rng, mask_id), mask_id)


def _point_mass(v: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[v] = 1.0
    return out


def true_posterior(x_t_i: int, x0_i: int, t: int, schedule: NoiseSchedule, vocab: Vocabulary) -> np.ndarray:
    """``q(x_{t-1} | x_t, x_0)`` at one position, over ``V ∪ {MASK}`` (MASK last)."""
    return reverse_kernel(x_t_i, _point_mass(x0_i, vocab.size), t, schedule, vocab)


def reverse_kernel(x_t_i: int, dist, t: int, schedule: NoiseSchedule, vocab: Vocabulary) -> np.ndarray:
    """Reverse step with the clean-token distribution ``dist`` in place of ``δ(x_0)``."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (vocab.size,):
        raise ContractError(f"reverse_kernel: distribution must have {vocab.size} entries")
    if np.any(dist < 0) or abs(dist.sum() - 1.0) > NORMALIZATION_ATOL:
        raise ContractError(f"reverse_kernel: distribution not normalized (sum={dist.sum():.8f})")
    if x_t_i != vocab.mask_id:
        if not 0 <= x_t_i < vocab.size:
            raise ContractError(f"reverse_kernel: token {x_t_i} outside vocabulary")
        return _point_mass(x_t_i, vocab.size + 1)
    a_prev, a_t = alpha_at(schedule, t - 1), alpha_at(schedule, t)
    if a_t >= 1.0:
        raise DegenerateScheduleError(f"position masked at t={t} although alpha_t = 1")
    out = np.empty(vocab.size + 1)
    out[:-1] = (a_prev - a_t) / (1.0 - a_t) * dist
    out[-1] = (1.0 - a_prev) / (1.0 - a_t)
    return out


def masked_cross_entropy(log_probs: ad.Tensor, x0: np.ndarray, masked: np.ndarray, weights: np.ndarray):
    """``-Σ_rows w_row * log p_row(x0_row)`` over flattened ``masked`` rows, on tape."""
    if masked.size == 0:
        return ad.Tensor(np.zeros((), dtype=log_probs.data.dtype))
    sel = ad.row_select(log_probs, masked)
    target = np.zeros(sel.shape, dtype=log_probs.data.dtype)
    target[np.arange(masked.size), x0[masked]] = weights
    return ad.scale(ad.sum(ad.mul(sel, target)), -1.0)


def elbo_loss(model, x0, t, schedule: NoiseSchedule, rng: np.random.Generator, *, tape=None, params=None, return_stats=False):
    """Weighted masked cross-entropy for clean sequences ``x0`` at steps ``t``.

    ``x0`` is ``(L,)`` or ``(B, L)``; ``t`` a scalar or one step per row. The
    batch loss is the mean over rows of ``w_t * Σ_masked CE``. Pass
    ``params`` bound as trainable leaves on ``tape`` to differentiate it.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    batch, length = x0.shape
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    alphas = np.array([alpha_at(schedule, int(s)) for s in ts])
    xt = mask_tokens(x0, alphas, rng, model.mask_id)
    tape = tape if tape is not None else ad.Tape()
    masked = np.flatnonzero(xt.reshape(-1) == model.mask_id)
    if masked.size == 0:
        loss = ad.Tensor(np.zeros((), dtype=tape.dtype))
        return (loss, {"masked": 0, "ce_sum": 0.0}) if return_stats else loss
    w_row = np.array([schedule.weight(int(s)) for s in ts]) / batch
    weights = np.repeat(w_row, length)[masked]
    if params is None:
        params = model.bind(tape, trainable=True)
    logits = model.forward_tokens(tape, xt, t=ts / schedule.T, params=params)
    logp = ad.log_softmax_rows(logits)
    flat_x0 = x0.reshape(-1)
    loss = masked_cross_entropy(logp, flat_x0, masked, weights)
    if not return_stats:
        return loss
    ce = -logp.data[masked, flat_x0[masked]].astype(np.float64)
    return loss, {"masked": int(masked.size), "ce_sum": float(ce.sum())}
