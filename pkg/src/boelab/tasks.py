"""Synthetic sequence tasks with known dependency structure, and exact evaluators."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError

TASK_KINDS = ("copy", "pivot_binding", "modular_chain")


@dataclass(frozen=True)
class TaskSpec:
    """Task family and shape.

    For ``pivot_binding`` the pivot takes one of ``2**pivot_bits`` values and
    each of the ``n_dependents`` dependents spells out one bit of it, so only
    the pivot settles every dependent at once. ``seed`` fixes the layout
    (pivot position, dependent positions, per-bit offsets).
    """

    kind: str
    seq_len: int
    vocab_size: int
    n_dependents: int = 8
    pivot_bits: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.seq_len < 2 or self.vocab_size < 2:
            raise ContractError("tasks need seq_len >= 2 and vocab_size >= 2")
        if self.kind == "copy" and self.seq_len % 2:
            raise ContractError("copy task needs an even seq_len")
        if self.kind == "pivot_binding":
            if self.n_dependents >= self.seq_len:
                raise ContractError(f"n_dependents={self.n_dependents} must be < seq_len={self.seq_len}")
            if self.n_dependents < 1 or self.pivot_bits < 1:
                raise ContractError("pivot_binding needs n_dependents >= 1 and pivot_bits >= 1")
            if self.vocab_size % 2 or 2**self.pivot_bits > self.vocab_size:
                raise ContractError("pivot_binding needs an even vocab_size >= 2**pivot_bits")

    @property
    def n_pivot_values(self) -> int:
        return 2**self.pivot_bits

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PivotLayout:
    pivot_index: int
    dependents: np.ndarray
    # bit of the pivot carried by each dependent
    bit_of: np.ndarray
    # token a dependent takes when its bit is 0; bit 1 adds vocab_size // 2
    offsets: np.ndarray


def pivot_layout(spec: TaskSpec) -> PivotLayout:
    if spec.kind != "pivot_binding":
        raise ContractError("pivot_layout is only defined for pivot_binding")
    rng = np.random.default_rng([spec.seed, 0x9A7])
    order = rng.permutation(spec.seq_len)
    pivot = int(order[0])
    deps = np.sort(order[1 : 1 + spec.n_dependents])
    half = spec.vocab_size // 2
    # offsets in 1..half-1 keep both dependent values away from token 0;
    # distinct when there is room, so each bit group has its own token pair
    pool = np.arange(1, half) if half > 1 else np.zeros(1, dtype=np.int64)
    offsets = rng.choice(pool, size=spec.pivot_bits, replace=spec.pivot_bits > pool.size)
    bit_of = np.arange(spec.n_dependents) % spec.pivot_bits
    return PivotLayout(pivot, deps, bit_of, offsets)


def dependent_values(spec: TaskSpec, layout: PivotLayout, pivot_tokens) -> np.ndarray:
    """Dependent tokens implied by ``pivot_tokens`` (read modulo the pivot alphabet)."""
    p = np.asarray(pivot_tokens, dtype=np.int64) % spec.n_pivot_values
    bits = (p[..., None] >> layout.bit_of) & 1
    return (layout.offsets[layout.bit_of] + bits * (spec.vocab_size // 2)) % spec.vocab_size


@dataclass
class TaskDataset:
    spec: TaskSpec
    tokens: np.ndarray
    # positions given to the decoder as context at evaluation time
    prompt_mask: np.ndarray
    pivot_index: int | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.tokens.shape[0])

    def prompts(self, mask_id: int) -> np.ndarray:
        """Token arrays with every non-prompt position set to ``mask_id``."""
        return np.where(self.prompt_mask, self.tokens, mask_id)


def prompt_positions(spec: TaskSpec) -> np.ndarray:
    mask = np.zeros(spec.seq_len, dtype=bool)
    if spec.kind == "copy":
        mask[: spec.seq_len // 2] = True
    elif spec.kind == "modular_chain":
        mask[0] = True
    else:
        layout = pivot_layout(spec)
        mask[:] = True
        mask[layout.pivot_index] = False
        mask[layout.dependents] = False
    return mask


def generate(spec: TaskSpec, n: int, seed: int | None = None) -> TaskDataset:
    """``n`` sequences; a pure function of ``(spec, seed)`` (``seed`` defaults to ``spec.seed``)."""
    if n < 0:
        raise ContractError("n must be >= 0")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x7A5C])
    L, V = spec.seq_len, spec.vocab_size
    pivot_index = None
    if spec.kind == "copy":
        half = rng.integers(0, V, size=(n, L // 2))
        tokens = np.concatenate([half, half], axis=1)
    elif spec.kind == "modular_chain":
        start = rng.integers(0, V, size=(n, 1))
        step = rng.integers(1, V, size=(n, 1))
        tokens = (start + step * np.arange(L)) % V
    else:
        layout = pivot_layout(spec)
        pivot_index = layout.pivot_index
        tokens = rng.integers(0, V, size=(n, L))
        pivots = rng.integers(0, spec.n_pivot_values, size=n)
        tokens[:, pivot_index] = pivots
        tokens[:, layout.dependents] = dependent_values(spec, layout, pivots)
    return TaskDataset(spec, tokens.astype(np.int64), prompt_positions(spec), pivot_index, seed)


def _check_complete(seqs: np.ndarray, spec: TaskSpec) -> np.ndarray:
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    if seqs.shape[1] != spec.seq_len:
        raise ContractError(f"sequences have length {seqs.shape[1]}, task expects {spec.seq_len}")
    if np.any((seqs < 0) | (seqs >= spec.vocab_size)):
        raise ContractError("sequences contain MASK or out-of-vocabulary tokens")
    return seqs


def constraint_checks(seqs, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence ``(all constraints hold, fraction of constrained positions consistent)``."""
    seqs = _check_complete(seqs, spec)
    V = spec.vocab_size
    if spec.kind == "copy":
        half = spec.seq_len // 2
        ok = seqs[:, half:] == seqs[:, :half]
        return ok.all(axis=1), ok.mean(axis=1)
    if spec.kind == "modular_chain":
        diffs = (seqs[:, 1:] - seqs[:, :-1]) % V
        ok = diffs == diffs[:, :1]
        valid = ok.all(axis=1) & (diffs[:, 0] != 0)
        return valid, ok[:, 1:].mean(axis=1) if ok.shape[1] > 1 else ok.mean(axis=1)
    layout = pivot_layout(spec)
    pivots = seqs[:, layout.pivot_index]
    ok = seqs[:, layout.dependents] == dependent_values(spec, layout, pivots)
    in_alphabet = pivots < spec.n_pivot_values
    return ok.all(axis=1) & in_alphabet, ok.mean(axis=1)


def evaluate(sequences, spec: TaskSpec) -> dict[str, float]:
    """Exact-match and constraint-satisfaction rates of completed sequences.

    A sequence is an exact match when every task constraint holds: the target
    half mirrors the prompt (copy), one nonzero step throughout
    (modular_chain), or every dependent agrees with the realized pivot, which
    must lie in the pivot alphabet (pivot_binding).
    """
    exact, partial = constraint_checks(sequences, spec)
    return {"exact_match": float(exact.mean()), "constraint_satisfaction": float(partial.mean())}


def write_jsonl(dataset: TaskDataset, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row in dataset.tokens:
            rec = {"tokens": [int(v) for v in row], "task": dataset.spec.kind, "pivot_index": dataset.pivot_index}
            fh.write(json.dumps(rec) + "\n")
    return path


def read_jsonl(path) -> tuple[np.ndarray, list[dict]]:
    records = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    tokens = np.array([r["tokens"] for r in records], dtype=np.int64)
    return tokens, records


def write_manifest(dataset: TaskDataset, path, extra: dict | None = None) -> Path:
    path = Path(path)
    body = {"spec": dataset.spec.to_dict(), "seed": dataset.seed, "n": len(dataset),
            "prompt_positions": np.flatnonzero(dataset.prompt_mask).tolist(), **(extra or {})}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
