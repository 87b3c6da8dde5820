"""Support-set construction and cosine-similarity classification.

A frozen model embeds every labelled support sample once; a query is then
assigned the class whose support embeddings it is most similar to. Two
decision rules are offered: "nearest" scores each class by its single most
similar support sample, "class_mean" scores by similarity to the class
centroid. Ties break deterministically by higher score, then lower class
index, then lexicographically smaller support id.

Similarities are computed in float64 and clipped to [-1, 1] to absorb
round-off at the boundaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import Manifest, SampleRecord
from .diffcore import no_grad
from .ensemble import EMBED_DIM, EnsembleModel, ensemble_forward, input_kind, pixels_to_input
from .imageio import load_grayscale
from .imgproc import RasterImage
from .metrics import MetricsReport, build_report

RULES = ("nearest", "class_mean")


@dataclass(frozen=True)
class SupportSet:
    """Per-class support embeddings, class order matching the manifest."""

    classes: tuple[str, ...]
    ids: tuple[tuple[str, ...], ...]
    embeddings: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("support set needs at least one class")
        if not (len(self.classes) == len(self.ids) == len(self.embeddings)):
            raise ValueError("classes, ids, and embeddings must align")
        dims = set()
        frozen_rows = []
        for name, sids, emb in zip(self.classes, self.ids, self.embeddings):
            e = np.asarray(emb, dtype=np.float64)
            if len(sids) == 0:
                raise ValueError(f"class {name!r} has no support samples")
            if e.ndim != 2 or e.shape[0] != len(sids):
                raise ValueError(f"class {name!r}: embeddings must be one row per id, got shape {e.shape}")
            if not np.isfinite(e).all():
                raise ValueError(f"class {name!r}: non-finite support embedding")
            dims.add(e.shape[1])
            e = e.copy()
            e.flags.writeable = False
            frozen_rows.append(e)
        if len(dims) != 1:
            raise ValueError(f"support embeddings disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "embeddings", tuple(frozen_rows))

    @property
    def dim(self) -> int:
        return self.embeddings[0].shape[1]

    @property
    def n_samples(self) -> int:
        return sum(len(s) for s in self.ids)


@dataclass(frozen=True)
class Prediction:
    label: int
    similarity: float
    nearest_support_id: str
    scores: tuple[float, ...]


def _plane(value) -> np.ndarray:
    if isinstance(value, RasterImage):
        value = value.pixels
    arr = pixels_to_input(value)
    if arr.ndim != 2:
        raise ValueError(f"expected a (H, W) image plane, got shape {arr.shape}")
    return arr


def _record_plane(rec: SampleRecord, images) -> np.ndarray:
    if images is not None:
        if rec.id not in images:
            raise KeyError(f"no image provided for sample id {rec.id!r}")
        return _plane(images[rec.id])
    return _plane(load_grayscale(rec.path))


def embed_records(
    model: EnsembleModel,
    records,
    images=None,
    batch_size: int = 32,
) -> np.ndarray:
    """Embed records in order; returns (n, 512) float32.

    For id-input models the record ids index the branch feature tables. For
    image-input models pixels come from the `images` mapping (id -> array or
    RasterImage) when given, otherwise from each record's path.
    """
    records = list(records)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    kind = input_kind(model)
    rows = []
    with no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            if kind == "id":
                out = ensemble_forward(model, [r.id for r in chunk])
            else:
                planes = np.stack([_record_plane(r, images) for r in chunk])
                out = ensemble_forward(model, planes[:, None, :, :])
            rows.append(out.data.copy())
    if not rows:
        return np.zeros((0, EMBED_DIM), dtype=np.float32)
    return np.concatenate(rows, axis=0)


def build_support_set(
    model: EnsembleModel,
    manifest: Manifest,
    images=None,
    batch_size: int = 32,
) -> SupportSet:
    manifest.validate()
    by_label = manifest.indices_by_label()
    for c, name in enumerate(manifest.classes):
        if c not in by_label:
            raise ValueError(f"class {name!r} has no support samples")
    emb = embed_records(model, manifest.records, images=images, batch_size=batch_size)
    ids = tuple(
        tuple(manifest.records[i].id for i in by_label[c]) for c in range(len(manifest.classes))
    )
    groups = tuple(emb[by_label[c]] for c in range(len(manifest.classes)))
    return SupportSet(tuple(manifest.classes), ids, groups)


def _cos_to_rows(q: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # one reduction path and a single sqrt keep the scores bitwise stable
    # under exact (power-of-two) rescaling of q
    sq_rows = (rows * rows).sum(axis=1)
    if (sq_rows == 0.0).any():
        bad = int(np.nonzero(sq_rows == 0.0)[0][0])
        raise ValueError(f"zero-norm support embedding at row {bad}")
    num = (rows * q).sum(axis=1)
    sims = num / np.sqrt(sq_rows * (q * q).sum())
    return np.clip(sims, -1.0, 1.0)


def _best_in_class(sims: np.ndarray, sids) -> tuple[float, str]:
    best_i = 0
    for i in range(1, len(sids)):
        if sims[i] > sims[best_i] or (sims[i] == sims[best_i] and sids[i] < sids[best_i]):
            best_i = i
    return float(sims[best_i]), sids[best_i]


def classify_embedding(query, support: SupportSet, rule: str = "nearest") -> Prediction:
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}, expected one of {RULES}")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != support.dim:
        raise ValueError(f"query dimension {q.shape[0]} != support dimension {support.dim}")
    if not np.isfinite(q).all():
        raise ValueError("non-finite query embedding")
    if float(q @ q) == 0.0:
        raise ValueError("zero-norm query embedding")

    scores: list[float] = []
    nearest: list[str] = []
    for c, (sids, rows) in enumerate(zip(support.ids, support.embeddings)):
        sims = _cos_to_rows(q, rows)
        best_sim, best_id = _best_in_class(sims, sids)
        nearest.append(best_id)
        if rule == "nearest":
            scores.append(best_sim)
        else:
            mean = rows.mean(axis=0)
            if float(mean @ mean) == 0.0:
                raise ValueError(f"class {support.classes[c]!r}: zero-norm mean embedding")
            scores.append(float(_cos_to_rows(q, mean[None, :])[0]))

    label = 0
    for c in range(1, len(scores)):
        if scores[c] > scores[label]:
            label = c
    return Prediction(
        label=label,
        similarity=scores[label],
        nearest_support_id=nearest[label],
        scores=tuple(scores),
    )


def classify(model: EnsembleModel, x, support: SupportSet, rule: str = "nearest") -> Prediction:
    """Embed one input (image plane, RasterImage, or sample id) and classify."""
    if isinstance(x, RasterImage):
        x = pixels_to_input(x.pixels)
    elif isinstance(x, np.ndarray):
        x = pixels_to_input(x)
    with no_grad():
        q = ensemble_forward(model, x)
    return classify_embedding(q.data, support, rule=rule)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    true_label: int
    prediction: Prediction


def batch_evaluate(
    model: EnsembleModel,
    test_manifest: Manifest,
    support: SupportSet,
    rule: str = "nearest",
    images=None,
    batch_size: int = 32,
) -> tuple[list[EvalRecord], MetricsReport]:
    """Classify every test record; per-class scores feed ROC/PR ranking."""
    if tuple(test_manifest.classes) != support.classes:
        raise ValueError(
            f"test classes {tuple(test_manifest.classes)} != support classes {support.classes}"
        )
    emb = embed_records(model, test_manifest.records, images=images, batch_size=batch_size)
    out: list[EvalRecord] = []
    for rec, q in zip(test_manifest.records, emb):
        try:
            pred = classify_embedding(q, support, rule=rule)
        except ValueError as exc:
            raise ValueError(f"sample {rec.id!r}: {exc}") from exc
        out.append(EvalRecord(rec.id, rec.label, pred))
    true = np.array([r.true_label for r in out], dtype=np.int64)
    pred_labels = np.array([r.prediction.label for r in out], dtype=np.int64)
    score_matrix = np.array([r.prediction.scores for r in out], dtype=np.float64)
    report = build_report(true, pred_labels, scores=score_matrix, class_names=support.classes)
    return out, report


def write_predictions(records: list[EvalRecord], class_names, path: str | Path) -> None:
    """CSV: sample_id,true_label,pred_label,similarity,nearest_support_id,score_0.."""
    names = tuple(class_names)
    k = len(names)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "true_label", "pred_label", "similarity", "nearest_support_id"]
            + [f"score_{c}" for c in range(k)]
        )
        for r in records:
            if len(r.prediction.scores) != k:
                raise ValueError(f"sample {r.sample_id!r}: expected {k} scores, got {len(r.prediction.scores)}")
            writer.writerow(
                [
                    r.sample_id,
                    names[r.true_label],
                    names[r.prediction.label],
                    repr(r.prediction.similarity),
                    r.prediction.nearest_support_id,
                ]
                + [repr(s) for s in r.prediction.scores]
            )
