"""Checkpoint files: magic, JSON header, then a little-endian float64 blob.

Layout::

    b"ASCNNET1" | uint64 LE header length | UTF-8 JSON header | <f8 parameters

Parameters are stored in ``Model.parameters()`` order; the header lists
their names and shapes so a load can be validated before any data is used.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import LayerSpec
from .model import Model

MAGIC = b"ASCNNET1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(e) for e in v]
    if isinstance(v, dict):
        return {k: _jsonable(e) for k, e in v.items()}
    return v


def to_bytes(model: Model, extra: dict | None = None) -> bytes:
    params = model.parameters()
    header = {
        "format_version": VERSION,
        "arch": model.arch,
        "scale": model.scale,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "config": _jsonable(model.config),
        "layers": [s.to_dict() for s in model.specs],
        "parameters": [[name, list(p.data.shape)] for name, p in params.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values())
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob


def from_bytes(raw: bytes, source: str = "<bytes>") -> tuple[Model, dict]:
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"corrupted checkpoint {source}: bad magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode())
        specs = [LayerSpec.from_dict(d) for d in header["layers"]]
        model = Model(specs, tuple(header["input_shape"]), seed=header["seed"],
                      arch=header["arch"], scale=header["scale"],
                      config={k: tuple(v) if isinstance(v, list) else v
                              for k, v in header["config"].items()})
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupted checkpoint {source}: unreadable header ({e})") from None
    blob = raw[16 + hlen:]
    params = model.parameters()
    expected = sum(int(np.prod(shape)) for _, shape in header["parameters"])
    if [n for n, _ in header["parameters"]] != list(params) or len(blob) != 8 * expected:
        raise CheckpointError(f"corrupted checkpoint {source}: parameter blob does not match header")
    flat = np.frombuffer(blob, dtype="<f8")
    off = 0
    for (name, shape), p in zip(header["parameters"], params.values()):
        n = int(np.prod(shape))
        p.data = flat[off:off + n].astype(np.float64).reshape(shape)
        off += n
    return model, header.get("extra", {})


def save(model: Model, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, extra))


def load(path) -> tuple[Model, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return from_bytes(raw, str(path))
