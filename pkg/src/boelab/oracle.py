"""Brute-force checks of the first-order entropy surrogate.

Everything here uses dense forwards with no row detach, and none of it is
counted as decoder work.

Notation: for a masked position ``i`` in state ``x_t``, ``H(alpha; i)`` is the
total entropy over a readout set at step ``t - 1`` when position ``i`` carries
``e_m + alpha * delta_i`` and every other masked position carries ``e_m``.
The exact reduction is ``H(0; i) - H(1; i)``; the first-order estimate is
``TIS_i = -<dH/de_i, delta_i>`` at ``alpha = 0``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .exceptions import AuditError, ContractError, NumericError
from .sampler import budget_schedule, prefilter, tis_all

READOUTS = ("masked", "exclude_self")
ENUMERATION_LIMIT = 32


def readout_rows(tokens, mask_id: int, i: int, readout: str = "masked") -> np.ndarray:
    """``M_t`` (``"masked"``) or ``M_t`` without ``i`` (``"exclude_self"``)."""
    if readout not in READOUTS:
        raise ContractError(f"unknown readout {readout!r}")
    rows = np.flatnonzero(np.asarray(tokens) == mask_id)
    return rows[rows != i] if readout == "exclude_self" else rows


def relaxed_entropy(model, tokens, i: int, delta, alpha: float, t: int, T: int, rows) -> float:
    """``H(alpha; i)`` over ``rows``: one dense forward in float64.

    Double precision keeps rounding out of the second differences, which
    divide by ``h**2``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    x = model.embed(tokens).astype(np.float64)
    x[i] = model.mask_embedding.astype(np.float64) + alpha * np.asarray(delta, dtype=np.float64)
    tape = ad.Tape(np.float64)
    return float(model.readout(tape, ad.Tensor(x), rows, t=(t - 1) / T).data)


def _check_masked(model, tokens, i):
    if np.asarray(tokens)[i] != model.mask_id:
        raise ContractError(f"position {i} is not masked")


def exact_delta_H(model, tokens, i: int, probs_i, t: int, T: int, *, readout: str = "masked") -> float:
    """``H(0; i) - H(1; i)`` with the soft write of ``probs_i`` at ``alpha = 1``."""
    _check_masked(model, tokens, i)
    rows = readout_rows(tokens, model.mask_id, i, readout)
    delta = model.delta(probs_i)
    return relaxed_entropy(model, tokens, i, delta, 0.0, t, T, rows) - relaxed_entropy(model, tokens, i, delta, 1.0, t, T, rows)


def entropy_path(model, tokens, i: int, probs_i, t: int, T: int, grid, *, readout: str = "masked") -> np.ndarray:
    _check_masked(model, tokens, i)
    rows = readout_rows(tokens, model.mask_id, i, readout)
    delta = model.delta(probs_i)
    return np.array([relaxed_entropy(model, tokens, i, delta, float(a), t, T, rows) for a in grid])


def second_difference_max(values, h: float) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise ContractError("curvature needs at least 3 grid points")
    d2 = np.abs(v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    if not np.all(np.isfinite(d2)):
        raise NumericError("non-finite second differences")
    return float(d2.max())


def _uniform_grid(grid) -> tuple[np.ndarray, float]:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 1 or g.size < 3:
        raise ContractError("grid needs at least 3 points")
    steps = np.diff(g)
    if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ContractError("grid must be increasing with uniform spacing")
    return g, float(steps[0])


def curvature_estimate(model, tokens, i: int, probs_i, t: int, T: int, grid=None, *, safety: float = 1.5,
                       readout: str = "masked") -> float:
    """``safety * max |second central difference| / h**2`` of ``H(alpha; i)`` over ``grid``.

    The default grid is 11 points on ``[0, 1]``. A finite grid can only
    under-estimate the supremum, hence the inflation factor.
    """
    g, h = _uniform_grid(np.linspace(0.0, 1.0, 11) if grid is None else grid)
    return safety * second_difference_max(entropy_path(model, tokens, i, probs_i, t, T, g, readout=readout), h)


# -- probes ---------------------------------------------------------------------------


@dataclass
class Probe:
    probe_id: int
    state_id: int
    t: int
    T: int
    i: int
    delta_exact: float
    tis: float
    m_hat: float
    m_hat_fine: float
    refine_flag: bool
    grad_norm: float
    delta_norm: float
    aqa_cosine: float | None = None
    err: float = field(init=False)
    bound_ok: bool | None = None

    def __post_init__(self):
        self.err = abs(self.delta_exact - self.tis)


def probe_state(model, tokens, t: int, T: int, *, state_id: int = 0, first_id: int = 0, positions=None,
                safety: float = 1.5, points: int = 11, readout: str = "masked", aqa_rho: float | None = 0.25,
                refine_tol: float = 0.2) -> list[Probe]:
    """Oracle records for masked ``positions`` (default all) of one state.

    TIS comes from a single dense backward over all masked positions. When
    ``aqa_rho`` is set, positions inside the ``aqa_rho`` candidate set also
    get the cosine between their row-detached and dense gradients.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    masked = np.flatnonzero(tokens == model.mask_id)
    positions = masked if positions is None else np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return []
    probs = model.predict_proba(tokens, t=t / T)
    if readout == "masked":
        dense = tis_all(model, tokens, positions, probs, t, T, aqa=False)
        tis = dict(zip(positions.tolist(), dense.tis))
        gnorm = dict(zip(positions.tolist(), np.linalg.norm(dense.grads, axis=1)))
    else:
        tis, gnorm = {}, {}
        for i in positions:
            r = tis_all(model, tokens, [i], probs, t, T, aqa=False,
                        readout_rows=readout_rows(tokens, model.mask_id, i, readout))
            tis[int(i)], gnorm[int(i)] = float(r.tis[0]), float(np.linalg.norm(r.grads[0]))
    cosines = {}
    if aqa_rho is not None:
        cand = prefilter(masked, probs, aqa_rho)
        for i, c in zip(cand.tolist(), aqa_fidelity(model, tokens, cand, probs, t, T)["cosine"]):
            cosines[i] = c
    coarse, h = _uniform_grid(np.linspace(0.0, 1.0, points))
    fine, h_fine = _uniform_grid(np.linspace(0.0, 1.0, 2 * points - 1))
    out = []
    for k, i in enumerate(positions.tolist()):
        path = entropy_path(model, tokens, i, probs[i], t, T, fine, readout=readout)
        m_hat = safety * second_difference_max(path[::2], h)
        m_fine = safety * second_difference_max(path, h_fine)
        flag = bool(abs(m_fine - m_hat) > refine_tol * max(m_hat, 1e-12))
        out.append(Probe(first_id + k, state_id, t, T, i, float(path[0] - path[-1]), float(tis[i]), m_hat, m_fine,
                         flag, float(gnorm[i]), float(np.linalg.norm(model.delta(probs[i]))), cosines.get(i)))
    return out


def sample_states(model, prompts, n_states: int, rng, *, budget: int = 1) -> list[tuple[np.ndarray, int, int]]:
    """States visited by confidence-greedy decodes with sampled writes.

    Each decode is paused at a uniformly drawn step ``t``; returns ``(x_t, t, T)``.
    """
    rng = np.random.default_rng(rng)
    prompts = np.atleast_2d(prompts)
    states = []
    for k in range(n_states):
        x = np.array(prompts[k % len(prompts)], dtype=np.int64)
        T = len(budget_schedule(budget, int(np.sum(x == model.mask_id))))
        t_stop = int(rng.integers(1, T + 1))
        for t in range(T, t_stop, -1):
            masked = np.flatnonzero(x == model.mask_id)
            probs = model.predict_proba(x, t=t / T)
            conf = probs[masked].max(axis=1)
            for i in masked[np.lexsort((masked, -conf))[:budget]]:
                x[i] = int(rng.choice(probs.shape[1], p=probs[i] / probs[i].sum()))
        states.append((x, t_stop, T))
    return states


def collect_probes(model, prompts, n_probes: int, rng, **kwargs) -> list[Probe]:
    """At least ``n_probes`` probes (truncated to exactly ``n_probes``) from sampled states."""
    if n_probes < 1:
        raise ContractError("need at least one probe")
    rng = np.random.default_rng(rng)
    probes: list[Probe] = []
    state_id = 0
    while len(probes) < n_probes:
        ((x, t, T),) = sample_states(model, prompts[state_id % len(prompts)][None], 1, rng)
        probes += probe_state(model, x, t, T, state_id=state_id, first_id=len(probes), **kwargs)
        state_id += 1
    return probes[:n_probes]


# -- checks ---------------------------------------------------------------------------


@dataclass
class OracleReport:
    probes: list[Probe]
    tol: float
    pass_rate: float
    n_flagged_refine: int

    def summary(self) -> dict:
        errs = np.array([p.err for p in self.probes]) if self.probes else np.zeros(0)
        return {"probes": len(self.probes), "pass_rate": self.pass_rate, "tol": self.tol,
                "max_err": float(errs.max()) if errs.size else 0.0, "refine_flags": self.n_flagged_refine}


def theorem_check(probes: list[Probe], tol: float = 1e-3) -> OracleReport:
    """Flag each probe with ``|delta_exact - tis| <= m_hat / 2 + tol``."""
    for p in probes:
        p.bound_ok = bool(p.err <= p.m_hat / 2 + tol)
    rate = float(np.mean([p.bound_ok for p in probes])) if probes else 1.0
    return OracleReport(probes, tol, rate, sum(p.refine_flag for p in probes))


@dataclass(frozen=True)
class PairCheck:
    state_id: int
    i: int
    j: int
    margin: float
    m_hat: float
    ok: bool


def ordering_check(probes: list[Probe]) -> list[PairCheck]:
    """Pairs in one state with ``tis_i - tis_j > max(m_hat_i, m_hat_j)``; ``ok`` iff the exact reductions agree."""
    by_state: dict[int, list[Probe]] = {}
    for p in probes:
        by_state.setdefault(p.state_id, []).append(p)
    out = []
    for sid, group in by_state.items():
        for a, b in permutations(group, 2):
            m = max(a.m_hat, b.m_hat)
            margin = a.tis - b.tis
            if margin > m:
                out.append(PairCheck(sid, a.i, b.i, margin, m, bool(a.delta_exact > b.delta_exact)))
    return out


def discrete_expectation(model, tokens, i: int, probs_i, t: int, T: int) -> float:
    """``sum_v pi(v) * H`` after hard-writing ``v`` at ``i``, entropy over the other masked positions."""
    _check_masked(model, tokens, i)
    pi = np.asarray(probs_i, dtype=np.float64)
    if pi.size > ENUMERATION_LIMIT:
        raise ContractError(f"enumeration over {pi.size} tokens exceeds the limit of {ENUMERATION_LIMIT}")
    rows = readout_rows(tokens, model.mask_id, i, "exclude_self")
    total = 0.0
    for v in np.flatnonzero(pi > 0):
        x = np.array(tokens, dtype=np.int64)
        x[i] = v
        tape = ad.Tape()
        h = float(model.readout(tape, ad.Tensor(model.embed(x)), rows, t=(t - 1) / T).data)
        total += pi[v] * h
    return total


def discrete_rank_correlation(model, tokens, candidates, probs, t: int, T: int) -> float:
    """Spearman correlation between TIS and the enumerated expected entropy reduction."""
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size < 2:
        return float("nan")
    tis = tis_all(model, tokens, cand, probs, t, T, aqa=False).tis
    base = relaxed_entropy(model, tokens, int(cand[0]), model.delta(probs[cand[0]]), 0.0, t, T,
                           readout_rows(tokens, model.mask_id, -1))
    reduction = [base - discrete_expectation(model, tokens, int(i), probs[i], t, T) for i in cand]
    return float(spearmanr(tis, reduction).statistic)


def cosine(a, b) -> float | None:
    """Cosine similarity; exactly 1.0 for identical vectors, ``None`` if either is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def aqa_fidelity(model, tokens, candidates, probs, t: int, T: int) -> dict:
    """Row-detached versus dense gradients for ``candidates``.

    Returns per-candidate cosines, both TIS vectors and whether the top-1
    candidate agrees.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        raise ContractError("aqa_fidelity needs a non-empty candidate set")
    sparse = tis_all(model, tokens, cand, probs, t, T, aqa=True)
    dense = tis_all(model, tokens, cand, probs, t, T, aqa=False)
    cos = [cosine(a, b) for a, b in zip(sparse.grads, dense.grads)]
    top_sparse = int(cand[np.lexsort((cand, -sparse.tis))[0]])
    top_dense = int(cand[np.lexsort((cand, -dense.tis))[0]])
    return {"candidates": cand.tolist(), "cosine": cos, "tis_aqa": sparse.tis.tolist(), "tis_dense": dense.tis.tolist(),
            "top1_agree": top_sparse == top_dense, "bitwise_equal": bool(np.array_equal(sparse.grads, dense.grads))}


def _top1(indices: np.ndarray, scores: np.ndarray) -> int:
    return int(indices[np.lexsort((indices, -np.asarray(scores)))[0]])


def dense_agreement(model, trace) -> dict[str, list[bool]]:
    """Replay a steering trace and compare its top-1 TIS against dense references.

    For each step, ``vs_masked`` says whether the top-1 by the recorded
    (row-detached) TIS over the candidate set equals the top-1 by dense TIS
    over every masked position; ``same_candidates`` restricts the dense
    ranking to the candidate set. Two extra forwards and one extra backward
    per step on top of the decode itself.
    """
    rec = trace.to_dict() if hasattr(trace, "to_dict") else dict(trace)
    if rec["kind"] != "boe":
        raise ContractError("dense_agreement needs a steering trace")
    x = np.array(rec["prompt"], dtype=np.int64)
    T = rec["T"]
    vs_masked, same = [], []
    for step in rec["steps"]:
        t = step["t"]
        masked = np.flatnonzero(x == model.mask_id)
        probs = model.predict_proba(x, t=t / T)
        cand = np.array([c["i"] for c in step["candidates"]], dtype=np.int64)
        top = _top1(cand, [c["tis"] for c in step["candidates"]])
        dense = tis_all(model, x, masked, probs, t, T, aqa=False).tis
        vs_masked.append(top == _top1(masked, dense))
        pos = np.searchsorted(masked, cand)
        same.append(top == _top1(cand, dense[pos]))
        for i, v in step["written"]:
            x[i] = v
    return {"vs_masked": vs_masked, "same_candidates": same}


# -- NFE accounting ---------------------------------------------------------------------


def nfe_audit(trace) -> dict:
    """Recompute the counters a trace must carry and compare them step by step.

    Greedy: one forward per step. Steering: two forwards and one backward.
    Raises :class:`AuditError` naming the first inconsistent step.
    """
    rec = trace.to_dict() if hasattr(trace, "to_dict") else dict(trace)
    kind, T, steps = rec["kind"], rec["T"], rec["steps"]
    per_step = {"greedy": (1, 0), "boe": (2, 1)}.get(kind)
    if per_step is None:
        raise AuditError(f"unknown trace kind {kind!r}")
    if len(steps) != T:
        raise AuditError(f"trace has {len(steps)} steps, expected T={T} (truncated or padded)")
    for k, step in enumerate(steps, start=1):
        want = (per_step[0] * k, per_step[1] * k)
        got = (step["nfe_forward"], step["nfe_backward"])
        if got != want:
            raise AuditError(f"step {k} (t={step['t']}): counters {got}, expected {want}")
        if step["t"] != T - k + 1:
            raise AuditError(f"step {k}: t={step['t']}, expected {T - k + 1}")
    total = (per_step[0] * T, per_step[1] * T)
    if (rec["nfe_forward"], rec["nfe_backward"]) != total:
        raise AuditError(f"totals {(rec['nfe_forward'], rec['nfe_backward'])}, expected {total}")
    return {"kind": kind, "T": T, "nfe_forward": total[0], "nfe_backward": total[1], "ok": True}


# -- output -----------------------------------------------------------------------------

CSV_COLUMNS = ("probe_id", "t", "i", "delta_exact", "tis", "m_hat", "err", "bound_ok", "aqa_cosine")


def write_report(report: OracleReport, jsonl_path, csv_path) -> None:
    with Path(jsonl_path).open("w", encoding="utf-8") as fh:
        for p in report.probes:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in report.probes:
            cos = "" if p.aqa_cosine is None else repr(p.aqa_cosine)
            w.writerow([p.probe_id, p.t, p.i, repr(p.delta_exact), repr(p.tis), repr(p.m_hat), repr(p.err),
                        int(bool(p.bound_ok)), cos])
