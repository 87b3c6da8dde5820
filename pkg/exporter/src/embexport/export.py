"""Batch export: manifest in, one EMB1 file + sidecar per family out."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import INPUT_SIDE, descriptor, extract_features, load_backbone
from .emb1 import write_emb1, write_sidecar
from .manifest import read_manifest


class ExportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExportResult:
    family: str
    path: Path
    sidecar: Path
    count: int
    dim: int
    sha256: str


def load_plane(path: str | Path) -> np.ndarray:
    """Image file -> (INPUT_SIDE, INPUT_SIDE) grayscale float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            gray = im.convert("L").resize((INPUT_SIDE, INPUT_SIDE), Image.BILINEAR)
    except OSError as exc:
        raise ExportError(f"{path}: cannot read image: {exc}") from exc
    return np.asarray(gray, dtype=np.float32) / 255.0


def export_manifest(
    manifest_path: str | Path,
    image_root: str | Path,
    out_dir: str | Path,
    families,
    weights: str = "pretrained",
    seed: int = 0,
    batch_size: int = 8,
) -> list[ExportResult]:
    """Run every manifest image through each family; write {family}.emb1.

    Images are loaded once and reused across families. Given a weight
    identifier (a fixed checkpoint, or a random init pinned by seed) the
    output bytes are a pure function of the manifest images.
    """
    ids, rel_paths = read_manifest(manifest_path)
    root = Path(image_root)
    planes = np.stack([load_plane(root / rel) for rel in rel_paths]) if ids else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results: list[ExportResult] = []
    for family in families:
        desc = descriptor(family)
        model, identifier = load_backbone(family, weights=weights, seed=seed)
        if planes is None:
            feats = np.empty((0, desc.feature_width), dtype=np.float32)
        else:
            feats = extract_features(model, planes, batch_size=batch_size)
        del model
        if feats.shape != (len(ids), desc.feature_width):
            raise ExportError(
                f"{family}: produced shape {feats.shape}, "
                f"expected ({len(ids)}, {desc.feature_width})"
            )
        emb_path = out_dir / f"{family}.emb1"
        sha = write_emb1(emb_path, ids, feats)
        side = write_sidecar(
            emb_path, family, desc.feature_width, desc.recipe, identifier, sha
        )
        results.append(
            ExportResult(family, emb_path, side, len(ids), desc.feature_width, sha)
        )
    return results
