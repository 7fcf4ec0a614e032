"""Experiment configuration: INI files with line-numbered errors and seeded sub-streams.

Sections and keys (everything except ``model.seq_len``, ``model.vocab_size``
and ``task.kind`` has a default)::

    [model]     seq_len vocab_size d_model n_layers n_heads d_hidden
                time_conditioning positional tie_output
    [schedule]  T kind
    [task]      kind n_dependents pivot_bits layout_seed n_train n_eval
    [train]     epochs batch_size lr clip_norm final_lr_fraction weight_decay
    [samplers]  names = confidence, entropy, boe
    [sampler.NAME]  options for one sampler (type = greedy | boe, plus its fields)
    [run]       seed replicates checkpoint workers
    [verify]    probes states safety tol aqa_rho
    [bench]     seq_len vocab_size d_model n_layers n_heads d_hidden reps warmup
"""

from __future__ import annotations

import configparser
import dataclasses
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .exceptions import ConfigError, ContractError
from .model import DenoiserConfig
from .sampler import LOCAL_SCORES, BoEConfig, GreedyConfig
from .tasks import TaskSpec
from .training import TrainConfig

REQUIRED = (("model", "seq_len"), ("model", "vocab_size"), ("task", "kind"))

# sampler names usable without their own section
BUILTIN_SAMPLERS = {
    "confidence": GreedyConfig(score="confidence"),
    "margin": GreedyConfig(score="margin"),
    "entropy": GreedyConfig(score="negentropy"),
    "boe": BoEConfig(),
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for the sub-stream ``name`` of a run seed."""
    return np.random.default_rng([int(seed) & (2**64 - 1), zlib.crc32(name.encode()), *map(int, extra)])


def sub_seed(seed: int, name: str, *extra: int) -> int:
    return int(stream(seed, name, *extra).integers(2**31 - 1))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # independent evaluation replicates in compare
    replicates: int = 1
    checkpoint: str = "model.estr"
    workers: int = 1


@dataclass(frozen=True)
class VerifyConfig:
    probes: int = 500
    states: int = 100
    safety: float = 1.5
    tol: float = 1e-3
    aqa_rho: float = 0.25


@dataclass(frozen=True)
class BenchConfig:
    seq_len: int = 256
    vocab_size: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 8
    d_hidden: int = 64
    reps: int = 60
    warmup: int = 3


@dataclass(frozen=True)
class TaskSection:
    spec: TaskSpec
    n_train: int = 4096
    n_eval: int = 500


@dataclass
class ExperimentConfig:
    model: DenoiserConfig
    schedule: NoiseSchedule
    task: TaskSection
    train: TrainConfig = field(default_factory=TrainConfig)
    samplers: list[tuple[str, GreedyConfig | BoEConfig]] = field(default_factory=list)
    run: RunConfig = field(default_factory=RunConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    source: str = "<string>"

    def with_overrides(self, *, seed=None, workers=None, probes=None, rho=None, aqa=None) -> "ExperimentConfig":
        """Copy with command-line overrides applied (``None`` leaves a value alone)."""
        run = self.run
        if seed is not None:
            run = dataclasses.replace(run, seed=int(seed))
        if workers is not None:
            run = dataclasses.replace(run, workers=int(workers))
        verify = self.verify if probes is None else dataclasses.replace(self.verify, probes=int(probes))
        samplers = []
        for name, cfg in self.samplers:
            if isinstance(cfg, BoEConfig):
                if rho is not None:
                    cfg = dataclasses.replace(cfg, rho=float(rho))
                if aqa is not None:
                    cfg = dataclasses.replace(cfg, aqa=bool(aqa))
            samplers.append((name, cfg))
        if rho is not None:
            verify = dataclasses.replace(verify, aqa_rho=float(rho))
        return dataclasses.replace(self, run=run, verify=verify, samplers=samplers)

    def to_ini(self) -> str:
        """Every resolved value, in a form :func:`parse_config` reads back to an equal config."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["model"] = _fields(self.model)
        cp["schedule"] = {"T": str(self.schedule.T), "kind": self.schedule.kind}
        spec = self.task.spec
        cp["task"] = {"kind": spec.kind, "n_dependents": str(spec.n_dependents), "pivot_bits": str(spec.pivot_bits),
                      "layout_seed": str(spec.seed), "n_train": str(self.task.n_train),
                      "n_eval": str(self.task.n_eval)}
        cp["train"] = _fields(self.train)
        cp["samplers"] = {"names": ", ".join(n for n, _ in self.samplers)}
        for name, cfg in self.samplers:
            body = {"type": "boe" if isinstance(cfg, BoEConfig) else "greedy", **_fields(cfg)}
            cp[f"sampler.{name}"] = body
        cp["run"] = _fields(self.run)
        cp["verify"] = _fields(self.verify)
        cp["bench"] = _fields(self.bench)
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


def _fields(obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        out[f.name] = str(v)
    return out


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """``(section, key) -> line number`` (1-based), plus ``(section, "") -> header line``."""
    where: dict[tuple[str, str], int] = {}
    section = ""
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, ""), n)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and section:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, lines: dict, path: str):
        self.cp = cp
        self.lines = lines
        self.path = path
        self.used: set[tuple[str, str]] = set()

    def error(self, msg: str, section: str, key: str = "") -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        return ConfigError(msg, line=line, path=self.path)

    def has(self, section: str, key: str) -> bool:
        return self.cp.has_option(section, key)

    def raw(self, section: str, key: str) -> str:
        self.used.add((section, key))
        return self.cp.get(section, key)

    def get(self, section: str, key: str, kind, default):
        if not self.has(section, key):
            return default
        text = self.raw(section, key).strip()
        try:
            if kind is bool:
                if text.lower() not in _BOOL:
                    raise ValueError(text)
                return _BOOL[text.lower()]
            if kind is tuple:
                return tuple(int(v) for v in re.split(r"[,\s]+", text) if v)
            return kind(text)
        except ValueError:
            raise self.error(f"{section}.{key}: cannot read {text!r} as {kind.__name__}", section, key) from None

    def build(self, section: str, cls, skip=(), rename=None):
        """Instantiate dataclass ``cls`` from the keys of ``section`` that name its fields."""
        rename = rename or {}
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            key = rename.get(f.name, f.name)
            kind = _field_kind(f)
            default = f.default if f.default is not dataclasses.MISSING else None
            value = self.get(section, key, kind, default)
            if value is not None or f.default is dataclasses.MISSING:
                kwargs[f.name] = value
        return kwargs


def _field_kind(f: dataclasses.Field):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t.startswith("int |") or "tuple" in t:
        return _budget
    return {"int": int, "float": float, "bool": bool, "str": str}.get(t, str)


def _budget(text: str):
    parts = [p for p in re.split(r"[,\s]+", text) if p]
    if len(parts) == 1:
        return int(parts[0])
    return tuple(int(p) for p in parts)


_budget.__name__ = "integer or integer list"


def parse_config(text: str, path: str = "<string>") -> ExperimentConfig:
    """Parse INI text; malformed lines, bad values and missing fields raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=path)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ConfigError("malformed line", line=line, path=path) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.section}.{exc.option}", line=exc.lineno, path=path) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno, path=path) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", line=exc.lineno, path=path) from None
    lines = _key_lines(text)
    r = _Reader(cp, lines, path)
    for section, key in REQUIRED:
        if not cp.has_option(section, key):
            raise r.error(f"missing required field {section}.{key}", section, key)

    def checked(section, build):
        try:
            return build()
        except ContractError as exc:
            raise r.error(f"[{section}] {exc}", section) from None

    model = checked("model", lambda: DenoiserConfig(**r.build("model", DenoiserConfig)))
    schedule = checked("schedule", lambda: NoiseSchedule(r.get("schedule", "t", int, 16),
                                                         r.get("schedule", "kind", str, "linear")))

    def task_section():
        spec = TaskSpec(r.raw("task", "kind").strip(), model.seq_len, model.vocab_size,
                        n_dependents=r.get("task", "n_dependents", int, 8),
                        pivot_bits=r.get("task", "pivot_bits", int, 2),
                        seed=r.get("task", "layout_seed", int, 0))
        sec = TaskSection(spec, r.get("task", "n_train", int, 4096), r.get("task", "n_eval", int, 500))
        if sec.n_train < 1 or sec.n_eval < 1:
            raise ContractError("n_train and n_eval must be >= 1")
        return sec

    task = checked("task", task_section)
    train = checked("train", lambda: TrainConfig(**r.build("train", TrainConfig)))
    names = r.get("samplers", "names", str, "confidence, boe")
    samplers = []
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        samplers.append((name, _sampler(r, name)))
    if len({n for n, _ in samplers}) != len(samplers):
        raise r.error("sampler names must be unique", "samplers", "names")
    run = checked("run", lambda: RunConfig(**r.build("run", RunConfig)))
    if run.replicates < 1 or run.workers < 1:
        raise r.error("run.replicates and run.workers must be >= 1", "run")
    verify = checked("verify", lambda: VerifyConfig(**r.build("verify", VerifyConfig)))
    if verify.probes < 1 or verify.states < 1:
        raise r.error("verify.probes and verify.states must be >= 1", "verify", "probes")
    bench = checked("bench", lambda: BenchConfig(**r.build("bench", BenchConfig)))
    _reject_unknown(r)
    return ExperimentConfig(model, schedule, task, train, samplers, run, verify, bench, source=path)


def _sampler(r: _Reader, name: str):
    section = f"sampler.{name}"
    if not r.cp.has_section(section):
        if name not in BUILTIN_SAMPLERS:
            raise r.error(f"sampler {name!r} has no [{section}] section and is not built in", "samplers", "names")
        return BUILTIN_SAMPLERS[name]
    kind = r.get(section, "type", str, "boe" if name == "boe" else "greedy")
    cls = {"boe": BoEConfig, "greedy": GreedyConfig}.get(kind)
    if cls is None:
        raise r.error(f"{section}.type must be 'boe' or 'greedy', got {kind!r}", section, "type")
    try:
        cfg = cls(**r.build(section, cls))
    except ContractError as exc:
        raise r.error(f"[{section}] {exc}", section) from None
    if isinstance(cfg, GreedyConfig) and cfg.score not in LOCAL_SCORES:
        raise r.error(f"unknown score {cfg.score!r}", section, "score")
    return cfg


_KNOWN_SECTIONS = {"model", "schedule", "task", "train", "samplers", "run", "verify", "bench"}


def _reject_unknown(r: _Reader) -> None:
    for section in r.cp.sections():
        if section not in _KNOWN_SECTIONS and not section.startswith("sampler."):
            raise r.error(f"unknown section [{section}]", section)
        for key in r.cp.options(section):
            if (section, key) not in r.used:
                raise r.error(f"unknown key {section}.{key}", section, key)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"not UTF-8 text: {exc.reason}", path=str(path)) from None
    return parse_config(text, str(path))
