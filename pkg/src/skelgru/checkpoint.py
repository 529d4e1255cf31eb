"""Binary checkpoint persistence for model parameters.

Layout (all integers little-endian):

    magic  b"SKGRU\\x00"
    u16    format version (currently 1)
    u32    config block length, then that many bytes of utf-8
           "key = value" lines (sorted keys, one per field)
    u32    topology hash length, then that many utf-8 bytes
    u32    tensor count, then per tensor:
        u16  name length, utf-8 name
        u8   ndim
        u32  per dimension
        f64  row-major payload (little-endian)
    32 bytes sha256 over everything above

Round-trips are bit-exact: float64 payloads are written raw, never
through a decimal representation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
import typing

import numpy as np

from .model import ModelConfig, ModelParams, init_model_params, named_parameters

MAGIC = b"SKGRU\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated, or incompatible."""


def config_to_text(config: ModelConfig) -> str:
    fields = sorted(f.name for f in dataclasses.fields(ModelConfig))
    lines = []
    for name in fields:
        value = getattr(config, name)
        lines.append(f"{name} = {value!r}" if isinstance(value, str) else f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    hints = typing.get_type_hints(ModelConfig)
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if " = " not in line:
            raise CheckpointError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition(" = ")
        key = key.strip()
        if key not in hints:
            raise CheckpointError(f"config line {lineno}: unknown field {key!r}")
        kind = hints[key]
        if kind is str:
            raw = raw.strip()
            if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
                raw = raw[1:-1]
            kwargs[key] = raw
        else:
            try:
                kwargs[key] = kind(raw)
            except ValueError:
                raise CheckpointError(
                    f"config line {lineno}: cannot parse {raw!r} as {kind.__name__}"
                ) from None
    missing = set(hints) - set(kwargs)
    if missing:
        raise CheckpointError(f"config block missing fields: {sorted(missing)}")
    return ModelConfig(**kwargs)


def save_checkpoint(params: ModelParams, config: ModelConfig, path, topology_hash: str = "") -> None:
    """Write params and config; topology_hash pins the skeleton layout."""
    parts = [MAGIC, struct.pack("<H", VERSION)]
    cfg = config_to_text(config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    topo = topology_hash.encode("utf-8")
    parts.append(struct.pack("<I", len(topo)))
    parts.append(topo)
    named = named_parameters(params)
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in sorted(named):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(
    path,
    expected_config: ModelConfig | None = None,
    expected_topology_hash: str | None = None,
) -> tuple[ModelParams, ModelConfig, str]:
    """Read a checkpoint back; returns (params, config, topology_hash).

    When expected_config is given, every field must match; a class-count
    mismatch is reported with both values since it is the common way to
    point a checkpoint at the wrong dataset.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    r = _Reader(body, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, supported {VERSION}")
    config = config_from_text(r.take(r.unpack("<I")).decode("utf-8"))
    topo_hash = r.take(r.unpack("<I")).decode("utf-8")

    if expected_config is not None:
        if config.classes != expected_config.classes:
            raise CheckpointError(
                f"{path}: checkpoint trained with {config.classes} classes, "
                f"current config has {expected_config.classes}"
            )
        if config != expected_config:
            raise CheckpointError(f"{path}: checkpoint config does not match current config")
    if expected_topology_hash is not None and topo_hash and topo_hash != expected_topology_hash:
        raise CheckpointError(f"{path}: checkpoint topology does not match current topology")

    params = init_model_params(config, seed=0)
    named = dict(named_parameters(params))
    count = r.unpack("<I")
    if count != len(named):
        raise CheckpointError(
            f"{path}: checkpoint has {count} tensors, model expects {len(named)}"
        )
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        if name not in named:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        target = named[name]
        if shape != target.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {list(shape)}, "
                f"model expects {list(target.shape)}"
        )
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * 8)
        target.data[...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return params, config, topo_hash
