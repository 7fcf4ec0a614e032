"""Binary checkpoint format.

Layout::

    b"ESTR" | u16 version | u32 header length | header (UTF-8 key=value lines)
    | float32 LE tensors in declaration order | u64 FNV-1a of everything before
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .diffusion import LOSS_WEIGHT_CONSTANT
from .exceptions import BadMagicError, ChecksumError, TruncatedError, VersionError
from .model import Denoiser, DenoiserConfig, param_shapes

MAGIC = b"ESTR"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _encode_header(config: DenoiserConfig, extra: dict | None) -> bytes:
    items = dict(config.to_dict())
    items["loss_weight_constant"] = LOSS_WEIGHT_CONSTANT
    items.update(extra or {})
    lines = []
    for key, value in items.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8")


def _decode_header(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def to_bytes(model: Denoiser, extra: dict | None = None) -> bytes:
    header = _encode_header(model.config, extra)
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for name, _ in param_shapes(model.config):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def from_bytes(blob: bytes) -> tuple[Denoiser, dict[str, str]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    if len(blob) < 10:
        raise TruncatedError("checkpoint truncated inside the preamble")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this reader supports {FORMAT_VERSION}")
    start = 10 + header_len
    intact = len(blob) >= start + 8 and struct.unpack_from("<Q", blob, len(blob) - 8)[0] == fnv1a64(blob[:-8])
    try:
        header = _decode_header(blob[10:start])
        names = {f.name for f in fields(DenoiserConfig)}
        config = DenoiserConfig.from_dict({k: v for k, v in header.items() if k in names})
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        if len(blob) < start:
            raise TruncatedError("checkpoint truncated inside the header") from exc
        raise ChecksumError(f"unreadable header ({exc}); checkpoint is corrupted") from exc
    shapes = param_shapes(config)
    n_floats = sum(int(np.prod(s)) for _, s in shapes)
    end = start + 4 * n_floats
    if len(blob) < end + 8:
        raise TruncatedError(f"checkpoint truncated: {len(blob)} bytes, expected {end + 8}")
    if len(blob) > end + 8 or not intact:
        raise ChecksumError("checksum mismatch: checkpoint is corrupted")
    flat = np.frombuffer(blob, dtype="<f4", count=n_floats, offset=start)
    params, pos = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        params[name] = flat[pos : pos + size].reshape(shape).astype(np.float32)
        pos += size
    return Denoiser(config, params), header


def save_checkpoint(model: Denoiser, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model, extra))
    return path


def load_checkpoint(path) -> Denoiser:
    return from_bytes(Path(path).read_bytes())[0]
