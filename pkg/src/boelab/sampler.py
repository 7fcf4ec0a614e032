"""Unmasking schedules: local-uncertainty greedy baselines and entropy-gradient steering.

Decoding runs ``t = T, T-1, ..., 1``. The state at step ``t`` is ``x_t`` with
masked set ``M_t``; each step writes ``b_t`` positions, so ``M_{t-1}`` is
``M_t`` minus the written set.

Any object with the attributes used here can stand in for
:class:`~boelab.model.Denoiser` (``vocab_size``, ``mask_id``,
``predict_proba``, ``embed``, ``delta``, ``readout``); the test suite relies
on that for analytic stubs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import entr

from . import autodiff as ad
from .autodiff import RowMask
from .exceptions import AuditError, ContractError

LOCAL_SCORES = ("confidence", "margin", "negentropy")


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class GreedyConfig:
    score: str = "confidence"
    budget: int | tuple[int, ...] = 1
    write: str = "argmax"

    def __post_init__(self):
        if self.score not in LOCAL_SCORES:
            raise ContractError(f"unknown local score {self.score!r}")
        _check_write(self.write)


@dataclass(frozen=True)
class BoEConfig:
    """Knobs of the entropy-gradient sampler.

    ``floor="decreasing"`` uses ``h_t = h_max * t / T`` (high early, since
    ``t`` counts down); ``"increasing"`` uses ``h_max * (1 - t / T)``.
    """

    rho: float = 0.25
    budget: int | tuple[int, ...] = 1
    write: str = "argmax"
    gating: bool = True
    h_max: float = 1.0
    lambda_max: float = 1.0
    aqa: bool = True
    prefilter: str = "confidence"
    floor: str = "decreasing"

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ContractError(f"rho must lie in (0, 1], got {self.rho}")
        if self.h_max < 0 or self.lambda_max < 0:
            raise ContractError("h_max and lambda_max must be >= 0")
        if self.prefilter not in LOCAL_SCORES:
            raise ContractError(f"unknown prefilter score {self.prefilter!r}")
        if self.floor not in ("decreasing", "increasing"):
            raise ContractError(f"unknown floor schedule {self.floor!r}")
        _check_write(self.write)


def _check_write(rule):
    if rule not in ("argmax", "sample"):
        raise ContractError(f"unknown write rule {rule!r}")


def budget_schedule(budget, n_masked: int, T: int | None = None) -> list[int]:
    """Per-step budgets ``[b_T, ..., b_1]`` that exactly use up ``n_masked`` positions."""
    if isinstance(budget, (int, np.integer)):
        b = int(budget)
        if b < 1:
            raise ContractError(f"budget must be >= 1, got {b}")
        steps = T if T is not None else math.ceil(n_masked / b)
        plan = [b] * steps
    else:
        plan = [int(v) for v in budget]
        if T is not None and len(plan) != T:
            raise ContractError(f"per-step budget has {len(plan)} entries, expected T={T}")
        if any(v < 0 for v in plan):
            raise ContractError("per-step budgets must be >= 0")
    if sum(plan) != n_masked:
        raise ContractError(f"budgets sum to {sum(plan)} but {n_masked} positions are masked")
    return plan


# -- per-position scores ------------------------------------------------------------


def entropies(probs) -> np.ndarray:
    """Row entropies in nats (``0 log 0 = 0``)."""
    return entr(np.asarray(probs, dtype=np.float64)).sum(axis=-1)


def local_scores(probs) -> dict[str, np.ndarray]:
    """Confidence, margin and negative entropy per row; higher means more certain."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    top2 = -np.partition(-p, 1, axis=1)[:, :2] if p.shape[1] > 1 else np.c_[p, np.zeros(len(p))]
    return {"confidence": top2[:, 0], "margin": top2[:, 0] - top2[:, 1], "negentropy": -entropies(p)}


def _top(indices: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """``k`` indices with the highest scores; ties go to the lower index."""
    order = np.lexsort((indices, -scores))
    return indices[order[:k]]


def prefilter(masked, probs, rho: float, score: str = "confidence") -> np.ndarray:
    """Candidate set: the ``ceil(rho * |M_t|)`` most certain masked positions.

    ``probs`` holds one distribution per position of the sequence.
    """
    if not 0 < rho <= 1:
        raise ContractError(f"rho must lie in (0, 1], got {rho}")
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size == 0:
        return masked
    # the small offset stops float products such as 0.1 * 30 rounding up
    r = max(1, math.ceil(rho * masked.size - 1e-9))
    s = local_scores(np.asarray(probs)[masked])[score]
    return np.sort(_top(masked, s, r))


def gate(tis, H, vocab_size: int):
    """Return ``(c, c * tis)`` with ``c = clip(1 - H / ln|V|, 0, 1)``."""
    c = np.clip(1.0 - np.asarray(H, dtype=np.float64) / math.log(vocab_size), 0.0, 1.0)
    return c, c * np.asarray(tis, dtype=np.float64)


def entropy_floor(t: int, T: int, h_max: float, kind: str = "decreasing") -> float:
    return h_max * t / T if kind == "decreasing" else h_max * (1.0 - t / T)


def anti_collapse_penalty(H, t: int, T: int, h_max: float, lambda_max: float, floor: str = "decreasing"):
    """``lambda_t * max(h_t - H, 0)**2`` with ``lambda_t = lambda_max * t / T``."""
    if not 1 <= t <= T:
        raise ContractError(f"penalty needs 1 <= t <= T, got t={t}, T={T}")
    h_t = entropy_floor(t, T, h_max, floor)
    lam = lambda_max * t / T
    return lam * np.maximum(h_t - np.asarray(H, dtype=np.float64), 0.0) ** 2


# -- one backward for every candidate ------------------------------------------------


@dataclass
class TISResult:
    candidates: np.ndarray
    grads: np.ndarray  # (|C|, d) input-embedding gradients g_i
    deltas: np.ndarray  # (|C|, d) soft write minus MASK embedding
    tis: np.ndarray
    surrogate: float  # readout value at alpha = 0
    backward_rows: int = 0


def tis_all(model, tokens, candidates, probs, t: int, T: int, *, aqa: bool = True, readout_rows=None) -> TISResult:
    """TIS for every candidate from one surrogate forward and one backward.

    Every candidate sits at the MASK embedding (interpolation weight 0), so a
    single relaxed state serves all of them. The readout is the total entropy
    over ``readout_rows`` (default: all masked positions) at step ``t - 1``.
    ``probs`` are the current-step distributions, one row per position.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        raise ContractError("tis_all needs at least one candidate")
    if np.any(tokens[cand] != model.mask_id):
        raise ContractError("candidates must be masked positions")
    rows = np.flatnonzero(tokens == model.mask_id) if readout_rows is None else np.asarray(readout_rows)
    tape = ad.Tape()
    x = tape.leaf(model.embed(tokens))
    active = RowMask(cand, tokens.size) if aqa else None
    root = model.readout(tape, x, rows, t=(t - 1) / T, active=active)
    grads = ad.backward(root).get(x) if root.tape is not None else None
    if grads is None:
        grads = np.zeros(x.shape, dtype=np.float32)
    g = grads[cand].astype(np.float64)
    deltas = np.stack([np.asarray(model.delta(probs[i]), dtype=np.float64) for i in cand])
    tis = -np.einsum("ij,ij->i", g, deltas)
    stats = tape.last_backward
    return TISResult(cand, g, deltas, tis, float(root.data), stats.rows if stats else 0)


# -- traces ------------------------------------------------------------------------


@dataclass
class DecodeTrace:
    kind: str
    T: int
    prompt: list[int]
    steps: list[dict] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    nfe_forward: int = 0
    nfe_backward: int = 0

    def unmask_step(self, position: int) -> int | None:
        """1-based decode step at which ``position`` was written."""
        for k, rec in enumerate(self.steps, start=1):
            if position in rec["selected"]:
                return k
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_jsonl(self, extra: dict | None = None) -> str:
        """One JSON object per step."""
        lines = []
        for rec in self.steps:
            lines.append(json.dumps({**(extra or {}), **rec}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _write(probs_i: np.ndarray, rule: str, rng) -> int:
    if rule == "argmax":
        return int(np.argmax(probs_i))
    p = np.asarray(probs_i, dtype=np.float64)
    return int(rng.choice(p.size, p=p / p.sum()))


def _start(model, prompt, budget, T):
    x = np.array(prompt, dtype=np.int64)
    if x.ndim != 1:
        raise ContractError("decode expects a single 1-D prompt")
    masked = np.flatnonzero(x == model.mask_id)
    plan = budget_schedule(budget, masked.size, T)
    return x, plan


# -- decoders ---------------------------------------------------------------------


def greedy_decode(model, prompt, config: GreedyConfig, rng=None, T: int | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Write the ``b_t`` most certain masked positions each step (one forward per step)."""
    rng = np.random.default_rng(rng)
    x, plan = _start(model, prompt, config.budget, T)
    T = len(plan)
    trace = DecodeTrace("greedy", T, x.tolist())
    for k, b in enumerate(plan):
        t = T - k
        masked = np.flatnonzero(x == model.mask_id)
        probs = model.predict_proba(x, t=t / T)
        trace.nfe_forward += 1
        s = local_scores(probs[masked])[config.score]
        chosen = _top(masked, s, min(b, masked.size))
        written = [(int(i), _write(probs[i], config.write, rng)) for i in chosen]
        for i, v in written:
            x[i] = v
        H = entropies(probs[masked])
        trace.steps.append({
            "t": t,
            "candidates": [{"i": int(i), "H": float(h), "score": float(v)} for i, h, v in zip(masked, H, s)],
            "selected": [int(i) for i in chosen],
            "written": [[i, v] for i, v in written],
            "nfe_forward": trace.nfe_forward,
            "nfe_backward": trace.nfe_backward,
        })
    trace.tokens = x.tolist()
    return x, trace


def select(candidates, scores, b: int) -> np.ndarray:
    """Top-``b`` candidates by score, ties to the lower index."""
    return _top(np.asarray(candidates, dtype=np.int64), np.asarray(scores, dtype=np.float64), b)


def boe_step(model, x: np.ndarray, t: int, T: int, b: int, config: BoEConfig, rng, trace: DecodeTrace) -> np.ndarray:
    """One steering step on ``x`` in place; appends a record to ``trace``."""
    masked = np.flatnonzero(x == model.mask_id)
    probs = model.predict_proba(x, t=t / T)
    trace.nfe_forward += 1
    cand = prefilter(masked, probs, config.rho, config.prefilter)
    res = tis_all(model, x, cand, probs, t, T, aqa=config.aqa)
    trace.nfe_forward += 1
    trace.nfe_backward += 1
    H = entropies(probs[cand])
    if config.gating:
        c, gated = gate(res.tis, H, model.vocab_size)
    else:
        c, gated = np.ones_like(res.tis), res.tis.copy()
    pen = anti_collapse_penalty(H, t, T, config.h_max, config.lambda_max, config.floor)
    score = gated - pen
    G = float(np.linalg.norm(res.grads, axis=1).max())
    D = float(np.linalg.norm(res.deltas, axis=1).max())
    # Cauchy-Schwarz with c <= 1; the factor only absorbs float64 rounding
    if np.any(np.abs(gated) > G * D * (1 + 1e-12)):
        raise AuditError(f"step t={t}: |c * TIS| exceeds G * D = {G * D:.6g}")
    shortfall = max(0, b - cand.size)
    chosen = select(cand, score, min(b, cand.size))
    written = [(int(i), _write(probs[i], config.write, rng)) for i in chosen]
    for i, v in written:
        x[i] = v
    trace.steps.append({
        "t": t,
        "candidates": [
            {"i": int(i), "H": float(h), "c": float(ci), "tis": float(v), "penalty": float(p), "score": float(s)}
            for i, h, ci, v, p, s in zip(cand, H, c, res.tis, pen, score)
        ],
        "selected": [int(i) for i in chosen],
        "written": [[i, v] for i, v in written],
        "nfe_forward": trace.nfe_forward,
        "nfe_backward": trace.nfe_backward,
        "G": G,
        "D": D,
        "shortfall": shortfall,
    })
    return x


def boe_decode(model, prompt, config: BoEConfig, rng=None, T: int | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Entropy-gradient steering: two forwards and one backward per step.

    A budget larger than the candidate set is clipped; the step record's
    ``shortfall`` field logs the difference, which is added to the next
    step's budget.
    """
    rng = np.random.default_rng(rng)
    x, plan = _start(model, prompt, config.budget, T)
    T = len(plan)
    trace = DecodeTrace("boe", T, x.tolist())
    carry = 0
    for k, b in enumerate(plan):
        t = T - k
        need = b + carry
        boe_step(model, x, t, T, need, config, rng, trace)
        carry = trace.steps[-1]["shortfall"]
    if carry:
        raise ContractError(f"decode ended with {carry} positions unwritten; raise rho or the budget")
    trace.tokens = x.tolist()
    return x, trace


def score_decomposition_ok(record: dict, atol: float = 1e-12) -> bool:
    """``score == c * tis - penalty`` for every candidate of a step record."""
    return all(abs(c["score"] - (c["c"] * c["tis"] - c["penalty"])) <= atol for c in record["candidates"])
