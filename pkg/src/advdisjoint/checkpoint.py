"""Binary checkpoint format for model sets.

Layout (all integers little-endian)::

    magic        6 bytes   b"ADVSET"
    version      u16
    header_len   u32
    header       JSON: model config, member count, provenance, train-config hash, seeds
    for each member, for each tensor in architecture order:
        name_len u16, name utf-8, ndim u8, dims u32 * ndim, values float32 * prod(dims)
    digest       32 bytes  sha256 of everything above

Values are always stored as float32.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ModelConfig, ModelSet, param_shapes

MAGIC = b"ADVSET"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"checkpoint field '{field}': {message}")


def config_hash(config: dict | None) -> str:
    if not config:
        return ""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def dumps(model_set: ModelSet, train_config: dict | None = None, seeds: dict | None = None) -> bytes:
    header = {
        "model": model_set.config.to_dict(),
        "members": model_set.n,
        "provenance": model_set.provenance,
        "train_config_hash": config_hash(train_config),
        "seeds": seeds or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for params in model_set.members:
        for name, shape in param_shapes(model_set.config):
            enc = name.encode()
            buf.write(struct.pack("<H", len(enc)))
            buf.write(enc)
            buf.write(struct.pack("<B", len(shape)))
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
            buf.write(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model_set: ModelSet, path: str | os.PathLike, train_config: dict | None = None,
                    seeds: dict | None = None) -> None:
    """Write atomically: the file appears only once it is complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model_set, train_config, seeds))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, field: str) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(field, f"truncated at byte {self.pos} (needed {size} bytes)")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def loads(data: bytes) -> tuple[ModelSet, dict]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("magic", "not a model-set checkpoint")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError("version", f"version mismatch: file has {version}, reader supports {VERSION}")
    (hlen,) = r.unpack("<I", "header_len")
    try:
        header = json.loads(r.take(hlen, "header"))
        config = ModelConfig.from_dict(header["model"])
        count = int(header["members"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError("header", str(exc)) from None
    members = []
    for m in range(count):
        params = {}
        for name, shape in param_shapes(config):
            where = f"member[{m}].{name}"
            (nlen,) = r.unpack("<H", where + ".name_len")
            got = r.take(nlen, where + ".name").decode(errors="replace")
            if got != name:
                raise CheckpointError(where + ".name", f"expected {name!r}, found {got!r}")
            (ndim,) = r.unpack("<B", where + ".ndim")
            dims = r.unpack(f"<{ndim}I", where + ".shape")
            if tuple(dims) != tuple(shape):
                raise CheckpointError(where + ".shape", f"expected {shape}, found {dims}")
            count_vals = int(np.prod(dims))
            vals = np.frombuffer(r.take(4 * count_vals, where + ".values"), dtype="<f4")
            params[name] = Tensor(vals.reshape(dims).astype(np.float32), requires_grad=True)
        members.append(params)
    body_end = r.pos
    digest = r.take(32, "digest")
    if r.pos != len(data):
        raise CheckpointError("digest", f"{len(data) - r.pos} unexpected trailing bytes")
    if hashlib.sha256(data[:body_end]).digest() != digest:
        raise CheckpointError("digest", "sha256 mismatch; file is corrupt")
    return ModelSet(config, members, header.get("provenance", "independent")), header


def load_checkpoint(path: str | os.PathLike) -> ModelSet:
    model_set, header = loads(Path(path).read_bytes())
    model_set.meta = header
    return model_set
