"""Adam training loop for the denoiser on the weighted masked cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, elbo_loss
from .exceptions import ContractError, DivergenceError
from .model import Denoiser


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    # linear decay of lr to this fraction over the run
    final_lr_fraction: float = 0.1
    # examples in the fixed draw the per-epoch curve is measured on
    monitor_size: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ContractError(f"learning rate must be finite and >= 0, got {self.lr}")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1 - c.beta1**self.step_count
        bc2 = 1 - c.beta2**self.step_count
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            upd = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)
            if c.weight_decay and k.split(".")[-1].startswith("w"):
                upd = upd + c.weight_decay * params[k]
            params[k] -= (lr * upd).astype(np.float32)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def monitor_loss(model: Denoiser, data: np.ndarray, ts: np.ndarray, schedule: NoiseSchedule, seed: int,
                 batch_size: int = 128) -> float:
    """Mean ELBO over ``data`` with steps ``ts`` and masks fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        loss = elbo_loss(model, chunk, ts[start : start + batch_size], schedule, rng)
        total += float(loss.data) * len(chunk)
    return total / len(data)


def train(
    model: Denoiser,
    dataset,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    callback=None,
) -> tuple[Denoiser, list[float]]:
    """Train a copy of ``model``; returns it with one loss value per epoch.

    Each example gets its own step ``t`` drawn uniformly from ``1..T``.
    ``rng`` drives shuffling, step draws and masking. The curve entry for an
    epoch is the mean loss after that epoch on a monitoring draw (a fixed
    subset with fixed steps and masks), so it only moves when the parameters
    do. Non-finite training loss raises :class:`DivergenceError`.
    """
    data = np.asarray(dataset, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractError("dataset must be a non-empty (n, L) array of token ids")
    if data.shape[1] > model.seq_len or np.any((data < 0) | (data >= model.vocab_size)):
        raise ContractError("dataset incompatible with the model's vocabulary or length")
    trained = Denoiser(model.config, {k: v.copy() for k, v in model.params.items()})
    params = trained.params  # updated in place
    opt = Adam(params, cfg)
    n = data.shape[0]
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    mon_idx = rng.choice(n, size=min(n, cfg.monitor_size), replace=False)
    mon_ts = rng.integers(1, schedule.T + 1, size=mon_idx.size)
    mon_seed = int(rng.integers(2**63))
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            ts = rng.integers(1, schedule.T + 1, size=batch.shape[0])
            tape = ad.Tape()
            leaves = trained.bind(tape, trainable=True)
            loss = elbo_loss(trained, batch, ts, schedule, rng, tape=tape, params=leaves)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}")
            if loss.tape is not None:
                grads = ad.backward(loss)
                g = {k: grads[t] for k, t in leaves.items() if t in grads}
                _clip(g, cfg.clip_norm)
                frac = step / max(total - 1, 1)
                lr = cfg.lr * (1 - (1 - cfg.final_lr_fraction) * frac)
                opt.step(params, g, lr)
            step += 1
        value = monitor_loss(trained, data[mon_idx], mon_ts, schedule, mon_seed)
        if not math.isfinite(value):
            raise DivergenceError(f"monitoring loss became {value} after epoch {epoch}")
        curve.append(value)
        if callback is not None:
            callback(epoch, curve[-1])
    return trained, curve


def prompted_cross_entropy(model: Denoiser, data, prompt_mask) -> float:
    """Mean CE over non-prompt positions when only the prompt is shown.

    Every position outside ``prompt_mask`` is masked at once and scored in a
    single forward, which is the hardest point of the reverse process.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.int64))
    keep = np.asarray(prompt_mask, dtype=bool)
    if keep.shape != (data.shape[1],) or keep.all():
        raise ContractError("prompt_mask must be one flag per position with at least one target")
    targets = np.flatnonzero(~keep)
    total = 0.0
    for row in data:
        x = np.where(keep, row, model.mask_id)
        p = model.predict_proba(x)[targets, row[targets]].astype(np.float64)
        total += float(-np.log(np.maximum(p, np.finfo(np.float64).tiny)).mean())
    return total / data.shape[0]
