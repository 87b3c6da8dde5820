"""The supported backbone families and their penultimate pooled features.

Each family is a torchvision model with its classifier head replaced by
identity, so the forward pass ends at the pooled feature vector the head
would have consumed. Feature widths are fixed per family:

  resnet101         2048
  densenet121       1024
  swin_b            1024
  mobilenet_v2      1280
  efficientnet_b0   1280
  resnext101_32x8d  2048

Weights are either the torchvision default pretrained checkpoint (the
sidecar records its exact enum name) or a seeded random initialization
for fully offline, reproducible runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIDE = 224

# single-channel input replicated to RGB, resized, scaled, then normalized
RECIPE = "gray->rgb,resize224-bilinear,scale[0,1],imagenet-norm"

WEIGHT_MODES = ("pretrained", "random")

# family -> (feature_width, torchvision builder name, classifier attribute)
_SPECS: dict[str, tuple[int, str, str]] = {
    "resnet101": (2048, "resnet101", "fc"),
    "densenet121": (1024, "densenet121", "classifier"),
    "swin_b": (1024, "swin_b", "head"),
    "mobilenet_v2": (1280, "mobilenet_v2", "classifier"),
    "efficientnet_b0": (1280, "efficientnet_b0", "classifier"),
    "resnext101_32x8d": (2048, "resnext101_32x8d", "fc"),
}

FAMILIES = tuple(_SPECS)


@dataclass(frozen=True)
class BackboneDescriptor:
    family: str
    feature_width: int
    recipe: str = RECIPE


def descriptor(family: str) -> BackboneDescriptor:
    if family not in _SPECS:
        raise ValueError(f"unknown backbone family {family!r}; choose from {FAMILIES}")
    return BackboneDescriptor(family, _SPECS[family][0])


def load_backbone(family: str, weights: str = "pretrained", seed: int = 0):
    """Build a frozen eval-mode feature extractor.

    Returns (module, weight identifier). ``weights="random"`` seeds torch
    before construction so the same seed always yields the same features;
    ``weights="pretrained"`` uses the torchvision default checkpoint and
    fails with a clear message when it cannot be obtained.
    """
    import torch
    from torch import nn
    import torchvision.models as tvm

    desc = descriptor(family)
    if weights not in WEIGHT_MODES:
        raise ValueError(f"weights must be one of {WEIGHT_MODES}, got {weights!r}")
    _, builder_name, head_attr = _SPECS[family]
    builder = getattr(tvm, builder_name)
    if weights == "random":
        torch.manual_seed(seed)
        model = builder(weights=None)
        identifier = f"random(seed={seed})"
    else:
        enum = tvm.get_model_weights(builder_name).DEFAULT
        try:
            model = builder(weights=enum)
        except Exception as exc:
            raise RuntimeError(
                f"could not obtain pretrained weights for {family} ({enum}): {exc}"
            ) from exc
        identifier = str(enum)
    setattr(model, head_attr, nn.Identity())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, identifier


def to_model_input(planes: np.ndarray) -> np.ndarray:
    """(B, H, W) grayscale in [0, 1] -> (B, 3, H, W) normalized float32."""
    planes = np.asarray(planes, dtype=np.float32)
    if planes.ndim != 3:
        raise ValueError(f"need (batch, height, width) planes, got shape {planes.shape}")
    rgb = np.repeat(planes[:, None, :, :], 3, axis=1)
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(IMAGENET_STD, dtype=np.float32).reshape(1, 3, 1, 1)
    return (rgb - mean) / std


def extract_features(model, planes: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Penultimate pooled features for grayscale planes, as float32 rows."""
    import torch

    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x = to_model_input(planes)
    chunks = []
    with torch.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            batch = torch.from_numpy(x[lo : lo + batch_size])
            chunks.append(model(batch).numpy().astype(np.float32, copy=False))
    return np.concatenate(chunks, axis=0) if chunks else np.empty((0, 0), np.float32)
