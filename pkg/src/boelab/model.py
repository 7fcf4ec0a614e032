"""Tiny bidirectional transformer denoiser with soft-write and row-detach ports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import RowMask, Tape, Tensor
from .exceptions import ContractError

_NEG_INF = -1e9


@dataclass(frozen=True)
class DenoiserConfig:
    seq_len: int
    vocab_size: int
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    d_hidden: int = 64
    time_conditioning: str = "none"
    positional: str = "learned"
    tie_output: bool = True

    def __post_init__(self):
        for name in ("seq_len", "vocab_size", "d_model", "n_layers", "n_heads", "d_hidden"):
            if getattr(self, name) < 1:
                raise ContractError(f"DenoiserConfig.{name} must be >= 1")
        if self.vocab_size < 2:
            raise ContractError("DenoiserConfig.vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.time_conditioning not in ("none", "scalar"):
            raise ContractError(f"unknown time_conditioning {self.time_conditioning!r}")
        if self.positional not in ("learned", "none"):
            raise ContractError(f"unknown positional {self.positional!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ContractError(f"unknown DenoiserConfig field {k!r}")
            if kinds[k] in ("int", int):
                v = int(v)
            elif kinds[k] in ("bool", bool):
                v = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
            out[k] = v
        return cls(**out)


def param_shapes(config: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (serialization) order."""
    d, hid, v = config.d_model, config.d_hidden, config.vocab_size
    shapes = [("tok_emb", (v + 1, d))]
    if config.positional == "learned":
        shapes.append(("pos_emb", (config.seq_len, d)))
    if config.time_conditioning == "scalar":
        shapes.append(("time_emb", (1, d)))
    for layer in range(config.n_layers):
        p = f"l{layer}."
        shapes += [(p + "ln1_g", (d,)), (p + "ln1_b", (d,))]
        shapes += [(p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)), (p + "wo", (d, d))]
        shapes += [(p + "bo", (d,)), (p + "ln2_g", (d,)), (p + "ln2_b", (d,))]
        shapes += [(p + "w1", (d, hid)), (p + "b1", (hid,)), (p + "w2", (hid, d)), (p + "b2", (d,))]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,))]
    if not config.tie_output:
        shapes.append(("out_w", (d, v)))
    shapes.append(("out_b", (v,)))
    return shapes


def init_params(config: DenoiserConfig, seed: int) -> dict[str, np.ndarray]:
    """Zero-centred scaled-uniform initialisation, a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        base = name.split(".")[-1]
        if base.endswith("_g"):
            arr = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b") or base == "out_b":
            arr = np.zeros(shape)
        elif base in ("tok_emb", "pos_emb", "time_emb"):
            arr = rng.uniform(-0.1, 0.1, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(np.float32)
    return params


def entropy_readout(logits: Tensor, over) -> Tensor:
    """Σ_{j in over} H(softmax(logits_j)) in nats, on the logits' tape."""
    rows = np.asarray(sorted(set(int(i) for i in over)), dtype=np.int64)
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    if rows[-1] >= logits.shape[0] or rows[0] < 0:
        raise ContractError(f"entropy_readout: rows out of range for {logits.shape[0]} positions")
    sel = ad.row_select(logits, rows)
    p = ad.softmax_rows(sel)
    logp = ad.log_softmax_rows(sel)
    return ad.scale(ad.sum(ad.mul(p, logp)), -1.0)


def _check_distribution(pi, size):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (size,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-5:
        raise ContractError("soft write needs a normalized distribution over data tokens")
    return pi


class Denoiser:
    """Parameters plus the forward map ``tokens -> per-position logits over V``.

    MASK has its own embedding row (the last row of ``tok_emb``) but is not in
    the output support.
    """

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        missing = [n for n, _ in expected if n not in params]
        if missing:
            raise ContractError(f"missing parameters: {missing}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {n: np.asarray(params[n], dtype=np.float32) for n, _ in expected}

    @classmethod
    def initialize(cls, config: DenoiserConfig, seed: int = 0) -> "Denoiser":
        return cls(config, init_params(config, seed))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def mask_id(self) -> int:
        return self.config.vocab_size

    @property
    def seq_len(self) -> int:
        return self.config.seq_len

    @property
    def embedding_table(self) -> np.ndarray:
        return self.params["tok_emb"][: self.vocab_size]

    @property
    def mask_embedding(self) -> np.ndarray:
        return self.params["tok_emb"][self.mask_id]

    # -- soft writes ----------------------------------------------------------

    def soft_embedding(self, pi) -> np.ndarray:
        """``E^T pi`` as a constant (no gradient flows into ``pi``)."""
        pi = _check_distribution(pi, self.vocab_size)
        return (pi @ self.embedding_table.astype(np.float64)).astype(np.float32)

    def delta(self, pi) -> np.ndarray:
        return (self.soft_embedding(pi) - self.mask_embedding).astype(np.float32)

    def embed(self, tokens, injections=None) -> np.ndarray:
        """Input embeddings with ``injections`` ({position: vector}) substituted."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size > self.seq_len:
            raise ContractError(f"expected a 1-D sequence of length <= {self.seq_len}")
        if np.any((tokens < 0) | (tokens > self.mask_id)):
            raise ContractError("token id outside vocabulary")
        x = self.params["tok_emb"][tokens].copy()
        for pos, vec in (injections or {}).items():
            if tokens[pos] != self.mask_id:
                raise ContractError(f"injection at unmasked position {pos}")
            x[pos] = vec
        return x

    # -- forward --------------------------------------------------------------

    def bind(self, tape: Tape, trainable: bool) -> dict[str, Tensor]:
        if trainable:
            return {n: tape.leaf(a) for n, a in self.params.items()}
        return {n: Tensor(a if tape.dtype == a.dtype else a.astype(tape.dtype)) for n, a in self.params.items()}

    def forward(self, tape: Tape, x, *, t=None, active: RowMask | None = None, params=None, batch: int = 1) -> Tensor:
        """Logits ``(batch*L, V)`` from input embeddings ``x`` ``(batch*L, d)``.

        ``t`` is the normalised time ``t/T`` (scalar or one per sequence) and
        is ignored without time conditioning. When ``active`` is given, every
        attention block output is passed through :func:`row_detach`.
        """
        cfg = self.config
        p = params if params is not None else self.bind(tape, trainable=False)
        n = x.shape[0]
        length = n // batch
        if length * batch != n or length > cfg.seq_len:
            raise ContractError(f"input of {n} rows does not split into {batch} sequences of length <= {cfg.seq_len}")
        if active is not None and active.length != n:
            raise ContractError(f"active mask length {active.length} != {n}")
        h = x
        if cfg.positional == "learned":
            h = ad.add(h, ad.gather_rows(p["pos_emb"], np.tile(np.arange(length), batch)))
        if cfg.time_conditioning == "scalar":
            tt = np.broadcast_to(np.asarray(0.0 if t is None else t, dtype=tape.dtype), (batch,))
            col = np.repeat(tt, length)[:, None]
            h = ad.add(h, ad.matmul(col, p["time_emb"]))
        bias = None
        if batch > 1:
            blocks = np.repeat(np.arange(batch), length)
            bias = np.where(blocks[:, None] == blocks[None, :], 0.0, _NEG_INF).astype(tape.dtype)
        for layer in range(cfg.n_layers):
            q = f"l{layer}."
            a = ad.add(ad.mul(ad.layer_norm_rows(h), p[q + "ln1_g"]), p[q + "ln1_b"])
            z = ad.attention(ad.matmul(a, p[q + "wq"]), ad.matmul(a, p[q + "wk"]), ad.matmul(a, p[q + "wv"]),
                             heads=cfg.n_heads, bias=bias)
            y = ad.matmul(z, p[q + "wo"])
            y = ad.add(y, p[q + "bo"])
            if active is not None:
                y = ad.row_detach(y, active)
            h = ad.add(h, y)
            m = ad.add(ad.mul(ad.layer_norm_rows(h), p[q + "ln2_g"]), p[q + "ln2_b"])
            m = ad.relu(ad.add(ad.matmul(m, p[q + "w1"]), p[q + "b1"]))
            m = ad.add(ad.matmul(m, p[q + "w2"]), p[q + "b2"])
            h = ad.add(h, m)
        hf = ad.add(ad.mul(ad.layer_norm_rows(h), p["lnf_g"]), p["lnf_b"])
        if cfg.tie_output:
            w_out = ad.transpose(ad.row_select(p["tok_emb"], np.arange(cfg.vocab_size)))
        else:
            w_out = p["out_w"]
        return ad.add(ad.matmul(hf, w_out), p["out_b"])

    def forward_tokens(self, tape: Tape, tokens, *, t=None, params=None, active=None, injections=None) -> Tensor:
        """Logits for token ids ``(L,)`` or ``(B, L)``.

        ``params`` is a dict from :meth:`bind`; pass trainable leaves to get
        parameter gradients, or leave it ``None`` for constants.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        batch = 1 if tokens.ndim == 1 else tokens.shape[0]
        params = params if params is not None else self.bind(tape, trainable=False)
        if injections:
            if tokens.ndim != 1:
                raise ContractError("injections are only supported for a single sequence")
            x = Tensor(self.embed(tokens, injections).astype(tape.dtype))
        else:
            x = ad.gather_rows(params["tok_emb"], tokens.reshape(-1))
        return self.forward(tape, x, t=t, active=active, params=params, batch=batch)

    # -- convenience used by samplers and oracles -------------------------------

    def logits(self, tokens, t=None, injections=None) -> np.ndarray:
        tape = Tape()
        return self.forward_tokens(tape, tokens, t=t, injections=injections).data

    def predict_proba(self, tokens, t=None, injections=None) -> np.ndarray:
        z = self.logits(tokens, t=t, injections=injections).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def readout(self, tape: Tape, x: Tensor, rows, *, t=None, active=None) -> Tensor:
        """Surrogate entropy Σ_{j in rows} H(p_j) for input embeddings ``x``."""
        logits = self.forward(tape, x, t=t, active=active)
        return entropy_readout(logits, rows)

    def surrogate_entropy(self, tokens, rows, *, t=None, injections=None) -> float:
        tape = Tape()
        x = Tensor(self.embed(tokens, injections))
        return float(self.readout(tape, x, rows, t=t).data)
