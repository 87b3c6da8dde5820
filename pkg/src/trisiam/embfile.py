"""EMB1 embedding interchange files.

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
  preprocessing  free-text recipe description
  weights        exact pretrained-weight identifier, or "random"
  sha256         hex digest of the complete binary file
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1


class EmbFileError(ValueError):
    pass


def write_embfile(path: str | Path, ids: list[str], vectors: np.ndarray) -> str:
    """Write records in the given order; returns the file's sha256 hex digest."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise EmbFileError(
            f"need (len(ids), dim) vectors, got {len(ids)} ids and shape {vectors.shape}"
        )
    if len(set(ids)) != len(ids):
        raise EmbFileError("duplicate sample ids")
    dim = vectors.shape[1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<II", len(ids), dim)
    for sid, vec in zip(ids, vectors):
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EmbFileError(f"sample id too long ({len(raw)} bytes)")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += np.ascontiguousarray(vec, dtype="<f4").tobytes()
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_embfile(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Parse an EMB1 file into (ids, (count, dim) float32 matrix)."""
    path = Path(path)
    blob = path.read_bytes()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise EmbFileError(f"{path}: truncated at offset {off} reading {what}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise EmbFileError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<B", need(1, "version"))
    if version != VERSION:
        raise EmbFileError(f"{path}: unsupported version {version}")
    count, dim = struct.unpack("<II", need(8, "count/dim"))
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    for k in range(count):
        (id_len,) = struct.unpack("<H", need(2, f"id length of record {k}"))
        ids.append(need(id_len, f"id of record {k}").decode("utf-8"))
        raw = need(4 * dim, f"vector of record {k}")
        matrix[k] = np.frombuffer(raw, dtype="<f4")
    if off != len(blob):
        raise EmbFileError(f"{path}: {len(blob) - off} trailing bytes at offset {off}")
    if len(set(ids)) != len(ids):
        raise EmbFileError(f"{path}: duplicate sample ids")
    return ids, matrix


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sidecar(
    emb_path: str | Path, backbone: str, preprocessing: str, weights: str
) -> Path:
    """Write the JSON sidecar next to an existing EMB1 file."""
    emb_path = Path(emb_path)
    _, matrix = read_embfile(emb_path)
    meta = {
        "backbone": backbone,
        "feature_width": int(matrix.shape[1]),
        "preprocessing": preprocessing,
        "weights": weights,
        "sha256": file_sha256(emb_path),
    }
    sidecar = emb_path.with_suffix(emb_path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def read_sidecar(emb_path: str | Path) -> dict:
    sidecar = Path(str(emb_path) + ".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    for key in ("backbone", "feature_width", "preprocessing", "weights", "sha256"):
        if key not in meta:
            raise EmbFileError(f"{sidecar}: missing key {key!r}")
    return meta


def verify_embfile(emb_path: str | Path, expect_sha256: str | None = None) -> dict:
    """Structural parse plus optional checksum comparison.

    With no explicit digest, the sidecar's is used. Returns a summary dict;
    raises EmbFileError on any corruption.
    """
    emb_path = Path(emb_path)
    ids, matrix = read_embfile(emb_path)
    if not np.isfinite(matrix).all():
        raise EmbFileError(f"{emb_path}: non-finite feature values")
    digest = file_sha256(emb_path)
    if expect_sha256 is None:
        expect_sha256 = read_sidecar(emb_path)["sha256"]
    if digest != expect_sha256:
        raise EmbFileError(
            f"{emb_path}: sha256 mismatch (file {digest[:16]}..., expected {expect_sha256[:16]}...)"
        )
    return {"count": len(ids), "dim": int(matrix.shape[1]), "sha256": digest}


def as_table(ids: list[str], matrix: np.ndarray) -> dict[str, np.ndarray]:
    """(ids, matrix) -> id -> vector mapping for branch construction."""
    return {sid: matrix[i] for i, sid in enumerate(ids)}
