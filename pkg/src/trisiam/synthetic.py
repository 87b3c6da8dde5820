"""Three-class synthetic texture images for desk-scale experiments.

Each sample is a bright disc on a dark background filled with one of three
textures: horizontal stripes, vertical stripes, or a checkerboard. The
classes are separable by construction (orientation and frequency content
differ), small enough to train in seconds, and every pixel is a pure
function of (seed, sample id), so datasets regenerate bit-identically.

Images are grouped two-per-patient so splitting code has real patient
structure to chew on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import Manifest, SampleRecord, save_manifest
from .imageio import save_png
from .imgproc import RasterImage
from .rng import derive_seed, uniform_array

SYNTH_CLASSES = ("horizontal", "vertical", "checker")

_FG = 170
_AMPLITUDE = 60
_BACKGROUND = 5


def make_image(
    label: int,
    seed: int,
    size: int = 96,
    period: int | None = None,
    noise: float = 6.0,
) -> RasterImage:
    """One synthetic sample. ``period`` is the full texture cycle in pixels
    (defaults to size // 8); ``noise`` is the half-width of uniform pixel
    noise added everywhere."""
    if not 0 <= label < len(SYNTH_CLASSES):
        raise ValueError(f"label must be in [0, {len(SYNTH_CLASSES)}), got {label}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if period is None:
        period = size // 8
    half = max(period // 2, 1)

    yy, xx = np.indices((size, size))
    if label == 0:
        phase = (yy // half) % 2
    elif label == 1:
        phase = (xx // half) % 2
    else:
        phase = (yy // half + xx // half) % 2

    center = (size - 1) / 2.0
    radius = 0.38 * size
    disc = (yy - center) ** 2 + (xx - center) ** 2 <= radius**2

    img = np.where(disc, _FG + _AMPLITUDE * (2 * phase - 1), _BACKGROUND).astype(np.float64)
    img += uniform_array(seed, size * size, -noise, noise).reshape(size, size)
    return RasterImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def make_samples(
    n_per_class: int,
    seed: int,
    size: int = 96,
    prefix: str = "",
) -> tuple[Manifest, dict[str, RasterImage]]:
    """In-memory dataset: a manifest plus an id -> image mapping.

    Ids look like ``h0003`` (class initial + index); every two consecutive
    samples of a class share a patient. Record paths point at the PNG names
    write_dataset would use, so the same manifest works on disk too.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    records = []
    images: dict[str, RasterImage] = {}
    for label, cname in enumerate(SYNTH_CLASSES):
        for i in range(n_per_class):
            sid = f"{prefix}{cname[0]}{i:04d}"
            pid = f"{prefix}p{cname[0]}{i // 2:03d}"
            records.append(SampleRecord(sid, f"images/{sid}.png", label, pid))
            images[sid] = make_image(label, derive_seed(seed, f"img.{sid}"), size)
    m = Manifest(SYNTH_CLASSES, records)
    m.validate()
    return m, images


def write_dataset(
    out_dir: str | Path,
    n_per_class: int,
    seed: int,
    size: int = 96,
    prefix: str = "",
    manifest_name: str = "manifest.csv",
) -> Path:
    """Materialise make_samples under out_dir; returns the manifest path.

    Layout: ``out_dir/<manifest_name>`` plus ``out_dir/images/<id>.png``,
    with manifest paths relative to out_dir. Distinct (prefix,
    manifest_name) pairs let several sets share one image root."""
    out = Path(out_dir)
    m, images = make_samples(n_per_class, seed, size, prefix)
    for rec in m.records:
        save_png(images[rec.id], out / rec.path)
    manifest_path = out / manifest_name
    save_manifest(m, manifest_path)
    return manifest_path
