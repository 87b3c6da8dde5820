"""Binary parameter checkpoints.

Layout, all integers little-endian:
  magic   8 bytes  b"TSNCKPT1" (the trailing digit is the format version)
  count   u32      number of parameters
  per parameter:
    name_len u16, name UTF-8 bytes
    frozen   u8 (0 or 1)
    ndim     u32, then ndim u32 extents
    values   product-of-extents float32 values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .diffcore import Parameter

MAGIC = b"TSNCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: list[Parameter], path: str | Path) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names must be unique")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            if p.data.dtype != np.float32:
                raise CheckpointError(
                    f"parameter {p.name!r}: checkpoints hold float32, got {p.data.dtype.name}"
                )
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", 1 if p.frozen else 0))
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, path: Path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path: str | Path) -> list[Parameter]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "count"))
        params: list[Parameter] = []
        for k in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path, f"name length {k}"))
            name = _read_exact(fh, name_len, path, f"name {k}").decode("utf-8")
            (frozen,) = struct.unpack("<B", _read_exact(fh, 1, path, f"flags of {name!r}"))
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path, f"rank of {name!r}"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path, f"shape of {name!r}"))
            size = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(fh, 4 * size, path, f"values of {name!r}")
            values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            params.append(Parameter(values, name=name, frozen=bool(frozen)))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} parameters")
    return params


def load_into(params: list[Parameter], path: str | Path) -> None:
    """Restore values into an existing parameter list, matched by name."""
    loaded = {p.name: p for p in load_checkpoint(path)}
    missing = [p.name for p in params if p.name not in loaded]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {', '.join(missing)}")
    extra = set(loaded) - {p.name for p in params}
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {', '.join(sorted(extra))}")
    for p in params:
        src = loaded[p.name]
        if src.data.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: {p.name!r} shape {src.data.shape} != expected {p.data.shape}"
            )
        p.data[...] = src.data
