"""Distance and loss functions for triplet training and classification.

All functions build on the diffcore tape, so every loss is differentiable
end to end. Conventions baked in here:

  - pairwise_distance(u, v) = (sum_i (|u_i - v_i| + eps)^p)^(1/p); the eps
    sits inside the power so the p-th root stays differentiable at u = v.
  - the ranking loss is max(0, -y * (x1 - x2) + margin); triplet training
    fixes y = -1 with x1 = d(anchor, positive), x2 = d(anchor, negative),
    which penalizes triplets where d_ap >= d_an - margin.
  - focal(p_t) = -alpha_t * (1 - p_t)^gamma * log(p_t); gamma = 0 with unit
    alpha reduces it to plain cross-entropy term by term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, absolute, exp, log

REDUCTIONS = ("mean", "sum")


@dataclass
class LossConfig:
    p: float = 2.0
    margin: float = 1.0
    distance_eps: float = 1e-6
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] | None = None  # None = uniform 1.0
    reduction: str = "mean"

    def validate(self, n_classes: int | None = None) -> None:
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.distance_eps < 0:
            raise ValueError(f"distance_eps must be >= 0, got {self.distance_eps}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.focal_alpha is not None:
            if any(not 0 < a <= 1 for a in self.focal_alpha):
                raise ValueError("focal_alpha entries must lie in (0, 1]")
            if n_classes is not None and len(self.focal_alpha) != n_classes:
                raise ValueError(
                    f"focal_alpha has {len(self.focal_alpha)} entries for {n_classes} classes"
                )
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def pairwise_distance(u, v, p: float = 2.0, eps: float = 1e-6) -> Tensor:
    """(sum_i (|u_i - v_i| + eps)^p)^(1/p) over the last axis.

    1-D inputs give a scalar; (B, D) inputs give a (B,) vector of distances.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"pairwise_distance: shape mismatch {u.shape} vs {v.shape}")
    if p < 1:
        raise ValueError(f"pairwise_distance: p must be >= 1, got {p}")
    diff = absolute(u - v) + float(eps)
    summed = (diff ** float(p)).sum(axis=diff.data.ndim - 1)
    return summed ** (1.0 / float(p))


def margin_ranking_loss(x1, x2, y: int, margin: float) -> Tensor:
    """max(0, -y * (x1 - x2) + margin), elementwise on matching shapes."""
    if y not in (-1, 1):
        raise ValueError(f"margin_ranking_loss: y must be -1 or +1, got {y}")
    x1, x2 = _as_tensor(x1), _as_tensor(x2)
    from .diffcore import relu

    return relu((x1 - x2) * float(-y) + float(margin))


def triplet_objective(e_a, e_p, e_n, cfg: LossConfig) -> Tensor:
    """Ranking loss over anchor/positive/negative embeddings.

    Batched (B, D) inputs produce one loss per row reduced per
    cfg.reduction; 1-D inputs produce the single-triplet scalar.
    """
    cfg.validate()
    d_ap = pairwise_distance(e_a, e_p, cfg.p, cfg.distance_eps)
    d_an = pairwise_distance(e_a, e_n, cfg.p, cfg.distance_eps)
    per_triplet = margin_ranking_loss(d_ap, d_an, -1, cfg.margin)
    if per_triplet.data.ndim == 0:
        return per_triplet
    return per_triplet.mean() if cfg.reduction == "mean" else per_triplet.sum()


def softmax(logits) -> Tensor:
    """Probabilities from a 1-D logit vector, max-shifted for stability."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError(f"softmax: need a 1-D vector, got shape {logits.shape}")
    shifted = exp(logits - float(logits.data.max()))
    return shifted / shifted.sum()


def focal_loss(probs, target: int, alpha=None, gamma: float = 2.0) -> Tensor:
    """-alpha[target] * (1 - p_t)^gamma * log(p_t) for p_t = probs[target]."""
    probs = _as_tensor(probs)
    if probs.data.ndim != 1:
        raise ValueError(f"focal_loss: need a 1-D simplex, got shape {probs.shape}")
    k = probs.shape[0]
    if not 0 <= target < k:
        raise ValueError(f"focal_loss: target {target} outside [0, {k})")
    if abs(float(probs.data.sum()) - 1.0) > 1e-6:
        raise ValueError(f"focal_loss: probs sum to {float(probs.data.sum())}, not 1")
    if np.any(probs.data <= 0):
        raise ValueError("focal_loss: probs must be strictly positive")
    if gamma < 0:
        raise ValueError(f"focal_loss: gamma must be >= 0, got {gamma}")
    if alpha is None:
        alpha_t = 1.0
    else:
        alpha_arr = np.asarray(alpha, dtype=np.float64)
        if alpha_arr.shape != (k,):
            raise ValueError(f"focal_loss: alpha shape {alpha_arr.shape} != ({k},)")
        if np.any(alpha_arr <= 0) or np.any(alpha_arr > 1):
            raise ValueError("focal_loss: alpha entries must lie in (0, 1]")
        alpha_t = float(alpha_arr[target])
    p_t = probs[target]
    return -(((1.0 - p_t) ** float(gamma)) * log(p_t) * alpha_t)


def cross_entropy(probs, target: int) -> Tensor:
    """-log(p_t); the gamma = 0, unit-alpha reference point for focal_loss."""
    probs = _as_tensor(probs)
    return -log(probs[target])


def cosine_similarity(u, v) -> Tensor:
    """u . v / (|u| |v|) for nonzero 1-D vectors."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape or u.data.ndim != 1:
        raise ValueError(f"cosine_similarity: need matching 1-D vectors, got {u.shape}, {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise ValueError("cosine_similarity: zero vector")
    dot = (u * v).sum()
    nu = (u * u).sum() ** 0.5
    nv = (v * v).sum() ** 0.5
    return dot / (nu * nv)
