"""Weight-shared embedding ensemble: branches, 512-d heads, fusion layer.

A model is N branches feeding one fusion layer. Each branch reduces its
input to a feature vector (a small CNN for images, or a lookup of
precomputed features by sample id) and applies a trainable affine head onto
512 dimensions. The N head outputs are concatenated in declared branch
order and fused by a final affine map (N*512) -> 512, with no nonlinearity.

Triplet evaluation reuses the same parameter set for anchor, positive, and
negative, so the three "subnetworks" are one network applied three times.
Embeddings are not L2-normalized before distances are taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    uniform_parameter,
)
from .losses import LossConfig, pairwise_distance
from .rng import derive_seed

EMBED_DIM = 512

TOY_KIND = "toy_cnn"
EXTERNAL_KIND = "external_embedding"


@dataclass
class Branch:
    kind: str
    name: str
    feature_width: int
    head_w: Parameter
    head_b: Parameter
    backbone_params: list[Parameter] = field(default_factory=list)
    table: dict[str, np.ndarray] | None = None

    def parameters(self) -> list[Parameter]:
        return [*self.backbone_params, self.head_w, self.head_b]


@dataclass
class EnsembleModel:
    branches: list[Branch]
    fusion_w: Parameter
    fusion_b: Parameter

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for b in self.branches:
            out.extend(b.parameters())
        out.extend([self.fusion_w, self.fusion_b])
        return out


def _head(seed: int, prefix: str, feature_width: int) -> tuple[Parameter, Parameter]:
    w = uniform_parameter(
        derive_seed(seed, f"{prefix}.head.w"), (EMBED_DIM, feature_width),
        fan_in=feature_width, name=f"{prefix}.head.w",
    )
    b = uniform_parameter(
        derive_seed(seed, f"{prefix}.head.b"), (EMBED_DIM,),
        fan_in=feature_width, name=f"{prefix}.head.b",
    )
    return w, b


def build_toy_encoder(seed: int, name: str = "toy", backbone_frozen: bool = False) -> Branch:
    """Small image branch: three stride-2 3x3 convs (8, 16, 32 channels, all
    padding 1) with a 2x2 max pool after the second, global average pooling
    to a 32-wide feature, then the 32 -> 512 head. Input sides must be
    multiples of 8 so the pool tiles exactly. Init is pinned by the seed.
    """
    convs = []
    for tag, (out_c, in_c) in [("conv1", (8, 1)), ("conv2", (16, 8)), ("conv3", (32, 16))]:
        w = uniform_parameter(
            derive_seed(seed, f"{name}.{tag}.w"), (out_c, in_c, 3, 3),
            fan_in=in_c * 9, name=f"{name}.{tag}.w", frozen=backbone_frozen,
        )
        b = uniform_parameter(
            derive_seed(seed, f"{name}.{tag}.b"), (out_c,),
            fan_in=in_c * 9, name=f"{name}.{tag}.b", frozen=backbone_frozen,
        )
        convs.extend([w, b])
    head_w, head_b = _head(seed, name, 32)
    return Branch(TOY_KIND, name, 32, head_w, head_b, backbone_params=convs)


def build_external_branch(
    feature_width: int, embedding_table: dict[str, np.ndarray],
    name: str = "external", seed: int = 0,
) -> Branch:
    """Branch over precomputed features: a frozen-by-construction lookup of
    sample id -> feature vector plus a trainable feature_width -> 512 head."""
    for sid, vec in embedding_table.items():
        if np.asarray(vec).shape != (feature_width,):
            raise ValueError(
                f"branch {name!r}: table entry {sid!r} has shape "
                f"{np.asarray(vec).shape}, expected ({feature_width},)"
            )
    head_w, head_b = _head(seed, name, feature_width)
    return Branch(EXTERNAL_KIND, name, feature_width, head_w, head_b,
                  table=dict(embedding_table))


def build_ensemble(branches: list[Branch], seed: int = 0) -> EnsembleModel:
    if not branches:
        raise ValueError("ensemble needs at least one branch")
    names = [b.name for b in branches]
    if len(set(names)) != len(names):
        raise ValueError(f"branch names must be unique, got {names}")
    n = len(branches)
    fusion_w = uniform_parameter(
        derive_seed(seed, "fusion.w"), (EMBED_DIM, n * EMBED_DIM),
        fan_in=n * EMBED_DIM, name="fusion.w",
    )
    fusion_b = uniform_parameter(
        derive_seed(seed, "fusion.b"), (EMBED_DIM,),
        fan_in=n * EMBED_DIM, name="fusion.b",
    )
    return EnsembleModel(list(branches), fusion_w, fusion_b)


def input_kind(model: EnsembleModel) -> str:
    """"image" when every branch consumes pixel planes, "id" when every
    branch looks features up by sample id. Mixed models have no single
    input an embedding call could accept, so they are rejected."""
    kinds = {b.kind for b in model.branches}
    if kinds == {TOY_KIND}:
        return "image"
    if kinds == {EXTERNAL_KIND}:
        return "id"
    raise ValueError(f"model mixes branch input kinds: {sorted(kinds)}")


def pixels_to_input(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W) image to the float32 [0, 1] plane the encoders expect;
    float arrays pass through unscaled."""
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr.astype(np.float32, copy=False)


def _toy_features(branch: Branch, images: Tensor) -> Tensor:
    w1, b1, w2, b2, w3, b3 = branch.backbone_params
    h = relu(conv2d(images, w1, b1, stride=2, padding=1))
    h = relu(conv2d(h, w2, b2, stride=2, padding=1))
    h = max_pool2d(h, 2)
    h = relu(conv2d(h, w3, b3, stride=2, padding=1))
    return flatten(global_avg_pool(h))


def _branch_forward(branch: Branch, x) -> Tensor:
    if branch.kind == TOY_KIND:
        if not isinstance(x, Tensor):
            raise ValueError(f"branch {branch.name!r} needs image input, got {type(x).__name__}")
        feats = _toy_features(branch, x)
    elif branch.kind == EXTERNAL_KIND:
        if not isinstance(x, list):
            raise ValueError(f"branch {branch.name!r} needs sample ids, got {type(x).__name__}")
        rows = []
        for sid in x:
            if sid not in branch.table:
                raise KeyError(f"branch {branch.name!r}: no features for sample id {sid!r}")
            rows.append(branch.table[sid])
        feats = Tensor(np.asarray(rows, dtype=np.float32))
    else:
        raise ValueError(f"unknown branch kind {branch.kind!r}")
    return linear(feats, branch.head_w, branch.head_b)


def ensemble_forward(model: EnsembleModel, x) -> Tensor:
    """Embed one input or a batch.

    x may be an image array (H,W), (1,H,W), or batch (N,1,H,W) for toy
    branches, or a sample id / list of ids for external branches. Returns a
    (512,) embedding for single inputs, (N, 512) for batches.
    """
    single = False
    if isinstance(x, str):
        x, single = [x], True
    elif isinstance(x, np.ndarray):
        if x.ndim == 2:
            x, single = x[None, None], True
        elif x.ndim == 3:
            x, single = x[None], True
        x = Tensor(x.astype(np.float32, copy=False))
    elif isinstance(x, Tensor):
        pass
    elif not isinstance(x, list):
        raise ValueError(f"unsupported input type {type(x).__name__}")
    outs = [_branch_forward(b, x) for b in model.branches]
    joined = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    emb = linear(joined, model.fusion_w, model.fusion_b)
    return emb[0] if single else emb


def triplet_forward(model: EnsembleModel, a, p, n, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """(d_ap, d_an) with one shared parameter set embedding all three."""
    e_a = ensemble_forward(model, a)
    e_p = ensemble_forward(model, p)
    e_n = ensemble_forward(model, n)
    d_ap = pairwise_distance(e_a, e_p, cfg.p, cfg.distance_eps)
    d_an = pairwise_distance(e_a, e_n, cfg.p, cfg.distance_eps)
    return d_ap, d_an


def count_parameters(model: EnsembleModel) -> tuple[int, int]:
    """(total, trainable) over the registry; trainable excludes frozen."""
    total = trainable = 0
    for p in model.parameters():
        total += p.data.size
        if not p.frozen:
            trainable += p.data.size
    return total, trainable
