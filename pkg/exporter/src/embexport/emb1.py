"""EMB1 interchange files: the wire format this exporter produces.

Binary layout, integers little-endian:
  magic    4 bytes  b"EMB1"
  version  u8       currently 1
  count    u32      number of records
  dim      u32      vector length shared by every record
  records, repeated count times:
    id_len u16, id UTF-8 bytes
    values dim float32

The JSON sidecar (same path + ".json") carries provenance and integrity:
  backbone       producing family name
  feature_width  == dim
  preprocessing  recipe identifier used to build model inputs
  weights        exact weight identifier, or "random(seed=N)"
  sha256         hex digest of the complete binary file

Consumers re-hash the binary and compare against the sidecar, so any
single flipped bit in the payload is detectable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1

SIDECAR_KEYS = ("backbone", "feature_width", "preprocessing", "weights", "sha256")


class Emb1Error(ValueError):
    pass


def write_emb1(path: str | Path, ids: list[str], vectors: np.ndarray) -> str:
    """Write records in the given order; returns the file's sha256 hex digest."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise Emb1Error(
            f"need (len(ids), dim) vectors, got {len(ids)} ids and shape {vectors.shape}"
        )
    if len(set(ids)) != len(ids):
        raise Emb1Error("duplicate sample ids")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<II", len(ids), vectors.shape[1])
    for sid, vec in zip(ids, vectors):
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise Emb1Error(f"sample id too long ({len(raw)} bytes)")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += np.ascontiguousarray(vec, dtype="<f4").tobytes()
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_emb1(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Parse an EMB1 file into (ids, (count, dim) float32 matrix)."""
    path = Path(path)
    blob = path.read_bytes()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise Emb1Error(f"{path}: truncated at offset {off} reading {what}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise Emb1Error(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<B", need(1, "version"))
    if version != VERSION:
        raise Emb1Error(f"{path}: unsupported version {version}")
    count, dim = struct.unpack("<II", need(8, "count/dim"))
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    for k in range(count):
        (id_len,) = struct.unpack("<H", need(2, f"id length of record {k}"))
        ids.append(need(id_len, f"id of record {k}").decode("utf-8"))
        raw = need(4 * dim, f"vector of record {k}")
        matrix[k] = np.frombuffer(raw, dtype="<f4")
    if off != len(blob):
        raise Emb1Error(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    if len(set(ids)) != len(ids):
        raise Emb1Error(f"{path}: duplicate sample ids")
    return ids, matrix


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sidecar_path(emb_path: str | Path) -> Path:
    return Path(str(emb_path) + ".json")


def write_sidecar(
    emb_path: str | Path,
    backbone: str,
    feature_width: int,
    preprocessing: str,
    weights: str,
    sha256: str,
) -> Path:
    meta = {
        "backbone": backbone,
        "feature_width": int(feature_width),
        "preprocessing": preprocessing,
        "weights": weights,
        "sha256": sha256,
    }
    out = sidecar_path(emb_path)
    out.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_sidecar(emb_path: str | Path) -> dict:
    side = sidecar_path(emb_path)
    meta = json.loads(side.read_text(encoding="utf-8"))
    for key in SIDECAR_KEYS:
        if key not in meta:
            raise Emb1Error(f"{side}: missing key {key!r}")
    return meta


def verify_emb1(emb_path: str | Path, expect_sha256: str | None = None) -> dict:
    """Structural parse plus checksum comparison.

    With no explicit digest, the sidecar's is used. Returns a summary dict;
    raises Emb1Error on any corruption, naming the offending offset for
    structural damage and the digests for payload damage.
    """
    emb_path = Path(emb_path)
    ids, matrix = read_emb1(emb_path)
    if not np.isfinite(matrix).all():
        raise Emb1Error(f"{emb_path}: non-finite feature values")
    digest = file_sha256(emb_path)
    if expect_sha256 is None:
        expect_sha256 = read_sidecar(emb_path)["sha256"]
    if digest != expect_sha256:
        raise Emb1Error(
            f"{emb_path}: sha256 mismatch (file {digest[:16]}..., expected {expect_sha256[:16]}...)"
        )
    return {"count": len(ids), "dim": int(matrix.shape[1]), "sha256": digest}
