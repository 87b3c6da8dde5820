"""8-bit grayscale PNG input/output.

Color inputs collapse to luminance with round(0.299 R + 0.587 G + 0.114 B);
alpha channels are ignored. Higher bit depths are rejected rather than
silently rescaled.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .imgproc import RasterImage, round_half_away


class ImageReadError(ValueError):
    pass


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def load_grayscale(path: str | Path) -> RasterImage:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "LA":
                arr = np.asarray(im)[:, :, 0].astype(np.uint8)
            elif mode in ("P", "1"):
                arr = _rgb_to_luma(np.asarray(im.convert("RGB")))
            elif mode == "RGB":
                arr = _rgb_to_luma(np.asarray(im))
            elif mode == "RGBA":
                arr = _rgb_to_luma(np.asarray(im)[:, :, :3])
            else:
                raise ImageReadError(f"{path}: unsupported image mode {mode!r} (8-bit grayscale or color expected)")
    except ImageReadError:
        raise
    except Exception as exc:
        raise ImageReadError(f"{path}: cannot read image ({exc})") from exc
    return RasterImage(arr.copy())


def _rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    luma = round_half_away(rgb.astype(np.float64) @ _LUMA)
    return np.clip(luma, 0, 255).astype(np.uint8)


def save_png(img: RasterImage, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.pixels, mode="L").save(path, format="PNG")
