"""Classification quality measures over a K-class confusion matrix.

Everything reads the matrix one-vs-rest: for class c the K-class matrix
collapses to (TP, FP, FN, TN) and the familiar rates follow. A ratio whose
denominator is zero resolves to 0.0 and the metric's name is recorded in an
``undefined`` tuple, so downstream reports can mark the value instead of
passing it off as a real zero.

Ranking quality is computed from per-class scores. AUC uses the rank
(Mann-Whitney) formulation with average ranks, which gives tied
positive/negative pairs half credit and therefore agrees exactly with
exhaustive pair counting. Curve points are generated at every distinct
threshold, descending.

F1 is evaluated as 2*TP / (2*TP + FP + FN), the count form of 2PR/(P+R).
Besides being one rounding step instead of three, it makes the micro
identity exact: for single-label data pooled FP and FN coincide, so micro
precision, recall, F1 and accuracy are all the same IEEE division.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

_PRF = ("precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
        if c.shape[0] < 1:
            raise ValueError("confusion matrix needs at least one class")
        if not np.issubdtype(c.dtype, np.integer):
            raise ValueError(f"confusion matrix holds counts, got dtype {c.dtype}")
        if (c < 0).any():
            raise ValueError("confusion matrix entries must be nonnegative")
        c = c.astype(np.int64, copy=True)
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        t = self.total
        return float(np.trace(self.counts)) / t if t else 0.0


def confusion(true_labels, predicted_labels, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.ndim != 1 or t.shape != p.shape:
        raise ValueError(f"label arrays must be 1-D and equal length, got shapes {t.shape} and {p.shape}")
    if n_classes < 1:
        raise ValueError("n_classes must be at least 1")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"{name} labels must be integers, got dtype {arr.dtype}")
        bad = np.nonzero((arr < 0) | (arr >= n_classes))[0]
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{name} label {int(arr[i])} at index {i} is outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t.astype(np.int64), p.astype(np.int64)), 1)
    return ConfusionMatrix(counts)


def one_vs_rest(cm: ConfusionMatrix, c: int) -> tuple[int, int, int, int]:
    """Collapse the matrix to (tp, fp, fn, tn) for class c."""
    if not 0 <= c < cm.n_classes:
        raise ValueError(f"class {c} outside [0, {cm.n_classes})")
    m = cm.counts
    tp = int(m[c, c])
    fp = int(m[:, c].sum()) - tp
    fn = int(m[c, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _f1_from_counts(tp: float, fp: float, fn: float, flags: list[str]) -> float:
    # flagged when precision + recall == 0, which happens exactly when tp == 0
    if tp == 0:
        flags.append("f1")
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    accuracy: float
    support: int
    undefined: tuple[str, ...] = ()


def class_metrics(cm: ConfusionMatrix, c: int) -> ClassMetrics:
    tp, fp, fn, tn = one_vs_rest(cm, c)
    flags: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    f1 = _f1_from_counts(tp, fp, fn, flags)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    accuracy = _ratio(tp + tn, tp + fp + fn + tn, "accuracy", flags)
    return ClassMetrics(precision, recall, f1, specificity, accuracy, support=tp + fn, undefined=tuple(flags))


@dataclass(frozen=True)
class RateTriple:
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()


@dataclass(frozen=True)
class AveragedMetrics:
    micro: RateTriple
    macro: RateTriple
    weighted: RateTriple
    accuracy: float

    @property
    def samples(self) -> RateTriple:
        """Samples average; an alias for micro when each sample has one label."""
        return self.micro


def averaged_metrics(cm: ConfusionMatrix) -> AveragedMetrics:
    k = cm.n_classes
    per = [class_metrics(cm, c) for c in range(k)]
    ovr = [one_vs_rest(cm, c) for c in range(k)]

    tp = float(sum(o[0] for o in ovr))
    fp = float(sum(o[1] for o in ovr))
    fn = float(sum(o[2] for o in ovr))
    micro_flags: list[str] = []
    mp = _ratio(tp, tp + fp, "precision", micro_flags)
    mr = _ratio(tp, tp + fn, "recall", micro_flags)
    mf = _f1_from_counts(tp, fp, fn, micro_flags)
    micro = RateTriple(mp, mr, mf, tuple(micro_flags))

    # flagged per-class values enter the means as the 0.0 placeholder; the
    # aggregate carries the union of contributing flags
    macro = RateTriple(
        float(np.mean([m.precision for m in per])),
        float(np.mean([m.recall for m in per])),
        float(np.mean([m.f1 for m in per])),
        tuple(sorted({f for m in per for f in m.undefined if f in _PRF})),
    )

    total = float(cm.total)
    if total:
        w = np.array([m.support for m in per], dtype=np.float64) / total
        weighted = RateTriple(
            float(w @ np.array([m.precision for m in per])),
            float(w @ np.array([m.recall for m in per])),
            float(w @ np.array([m.f1 for m in per])),
            tuple(sorted({f for m in per if m.support for f in m.undefined if f in _PRF})),
        )
    else:
        weighted = RateTriple(0.0, 0.0, 0.0, _PRF)

    return AveragedMetrics(micro=micro, macro=macro, weighted=weighted, accuracy=cm.accuracy())


# ---------------------------------------------------------------------------
# ranking metrics


def _check_scores(scores, true_labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(true_labels)
    if s.ndim != 2:
        raise ValueError(f"scores must be (n_samples, n_classes), got shape {s.shape}")
    if t.ndim != 1 or t.shape[0] != s.shape[0]:
        raise ValueError(f"labels must be 1-D with one entry per score row, got shape {t.shape}")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if t.size:
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {t.dtype}")
        if (t < 0).any() or (t >= s.shape[1]).any():
            raise ValueError(f"labels must lie in [0, {s.shape[1]})")
    return s, t.astype(np.int64)


def _binary_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Rank formulation; ties between a positive and a negative earn 0.5."""
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = pos.size, neg.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u) / (n_pos * n_neg)


@dataclass(frozen=True)
class AucSummary:
    per_class: tuple[float, ...]
    per_class_defined: tuple[bool, ...]
    macro: float
    macro_defined: bool
    micro: float
    micro_defined: bool


def roc_auc(scores, true_labels) -> AucSummary:
    s, t = _check_scores(scores, true_labels)
    n, k = s.shape
    per: list[float] = []
    ok: list[bool] = []
    for c in range(k):
        mask = t == c
        pos, neg = s[mask, c], s[~mask, c]
        if pos.size == 0 or neg.size == 0:
            per.append(0.0)
            ok.append(False)
        else:
            per.append(_binary_auc(pos, neg))
            ok.append(True)
    defined = [v for v, o in zip(per, ok) if o]
    macro = float(np.mean(defined)) if defined else 0.0

    # micro pools every (sample, class) decision into one binary problem
    onehot = t[:, None] == np.arange(k)[None, :]
    pos, neg = s[onehot], s[~onehot]
    micro_ok = pos.size > 0 and neg.size > 0
    micro = _binary_auc(pos, neg) if micro_ok else 0.0
    return AucSummary(tuple(per), tuple(ok), macro, bool(defined), micro, micro_ok)


def _one_class_sweep(sc: np.ndarray, pos_mask: np.ndarray):
    """Yield (n_predicted_pos, tp) at every distinct threshold, descending."""
    for thr in np.unique(sc)[::-1]:
        pred = sc >= thr
        yield int(np.count_nonzero(pred)), int(np.count_nonzero(pred & pos_mask))


def roc_curve(scores, true_labels) -> list[list[tuple[float, float]]]:
    """Per-class (fpr, tpr) staircases from (0, 0) up to (1, 1).

    A class without both positives and negatives gets an empty list.
    """
    s, t = _check_scores(scores, true_labels)
    out: list[list[tuple[float, float]]] = []
    for c in range(s.shape[1]):
        pos_mask = t == c
        n_pos = int(np.count_nonzero(pos_mask))
        n_neg = t.size - n_pos
        if n_pos == 0 or n_neg == 0:
            out.append([])
            continue
        pts = [(0.0, 0.0)]
        for n_pred, tp in _one_class_sweep(s[:, c], pos_mask):
            pts.append(((n_pred - tp) / n_neg, tp / n_pos))
        out.append(pts)
    return out


def pr_curve(scores, true_labels) -> list[list[tuple[float, float]]]:
    """Per-class (recall, precision) points, threshold descending.

    The leading point is (0, 1): with zero predicted positives precision
    is taken to be 1.0 by convention. Recall never decreases along a curve,
    and the sweep stops once recall reaches 1; lower thresholds would only
    repeat recall 1.0 at lower precision.
    """
    s, t = _check_scores(scores, true_labels)
    out: list[list[tuple[float, float]]] = []
    for c in range(s.shape[1]):
        pos_mask = t == c
        n_pos = int(np.count_nonzero(pos_mask))
        n_neg = t.size - n_pos
        if n_pos == 0 or n_neg == 0:
            out.append([])
            continue
        pts = [(0.0, 1.0)]
        for n_pred, tp in _one_class_sweep(s[:, c], pos_mask):
            pts.append((tp / n_pos, tp / n_pred))
            if tp == n_pos:
                break
        out.append(pts)
    return out


# ---------------------------------------------------------------------------
# report assembly and serialization


@dataclass(frozen=True)
class MetricsReport:
    confusion: ConfusionMatrix
    class_names: tuple[str, ...]
    per_class: tuple[ClassMetrics, ...]
    averages: AveragedMetrics
    auc: AucSummary | None = None
    roc: tuple[tuple[tuple[float, float], ...], ...] | None = None
    pr: tuple[tuple[tuple[float, float], ...], ...] | None = None

    @property
    def accuracy(self) -> float:
        return self.averages.accuracy


def build_report(
    true_labels,
    predicted_labels,
    n_classes: int | None = None,
    scores=None,
    class_names=None,
) -> MetricsReport:
    """Assemble the full report; ranking sections appear only with scores."""
    if class_names is not None:
        k = len(class_names)
    elif scores is not None:
        k = np.asarray(scores).shape[1]
    elif n_classes is not None:
        k = n_classes
    else:
        merged = list(true_labels) + list(predicted_labels)
        k = int(max(merged)) + 1 if merged else 1
    if n_classes is not None and n_classes != k:
        raise ValueError(f"n_classes {n_classes} disagrees with inferred class count {k}")
    names = tuple(class_names) if class_names is not None else tuple(str(c) for c in range(k))

    cm = confusion(true_labels, predicted_labels, k)
    per = tuple(class_metrics(cm, c) for c in range(k))
    avg = averaged_metrics(cm)
    if scores is None:
        return MetricsReport(cm, names, per, avg)
    return MetricsReport(
        cm,
        names,
        per,
        avg,
        auc=roc_auc(scores, true_labels),
        roc=tuple(tuple(p) for p in roc_curve(scores, true_labels)),
        pr=tuple(tuple(p) for p in pr_curve(scores, true_labels)),
    )


def _triple_dict(r: RateTriple) -> dict:
    return {"precision": r.precision, "recall": r.recall, "f1": r.f1, "undefined": list(r.undefined)}


def _triple_from(d: dict) -> RateTriple:
    return RateTriple(d["precision"], d["recall"], d["f1"], tuple(d["undefined"]))


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "n_classes": report.confusion.n_classes,
        "n_samples": report.confusion.total,
        "class_names": list(report.class_names),
        "accuracy": report.accuracy,
        "confusion": report.confusion.counts.tolist(),
        "per_class": [
            {
                "name": report.class_names[c],
                "support": m.support,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "specificity": m.specificity,
                "accuracy": m.accuracy,
                "undefined": list(m.undefined),
            }
            for c, m in enumerate(report.per_class)
        ],
        "micro": _triple_dict(report.averages.micro),
        "macro": _triple_dict(report.averages.macro),
        "weighted": _triple_dict(report.averages.weighted),
        "auc": None
        if report.auc is None
        else {
            "per_class": [v if d else None for v, d in zip(report.auc.per_class, report.auc.per_class_defined)],
            "macro": report.auc.macro if report.auc.macro_defined else None,
            "micro": report.auc.micro if report.auc.micro_defined else None,
        },
        "roc": None if report.roc is None else [[list(p) for p in pts] for pts in report.roc],
        "pr": None if report.pr is None else [[list(p) for p in pts] for pts in report.pr],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> MetricsReport:
    doc = json.loads(text)
    cm = ConfusionMatrix(np.array(doc["confusion"], dtype=np.int64))
    per = tuple(
        ClassMetrics(
            precision=e["precision"],
            recall=e["recall"],
            f1=e["f1"],
            specificity=e["specificity"],
            accuracy=e["accuracy"],
            support=e["support"],
            undefined=tuple(e["undefined"]),
        )
        for e in doc["per_class"]
    )
    avg = AveragedMetrics(
        micro=_triple_from(doc["micro"]),
        macro=_triple_from(doc["macro"]),
        weighted=_triple_from(doc["weighted"]),
        accuracy=doc["accuracy"],
    )
    auc = None
    if doc["auc"] is not None:
        a = doc["auc"]
        auc = AucSummary(
            per_class=tuple(0.0 if v is None else v for v in a["per_class"]),
            per_class_defined=tuple(v is not None for v in a["per_class"]),
            macro=0.0 if a["macro"] is None else a["macro"],
            macro_defined=a["macro"] is not None,
            micro=0.0 if a["micro"] is None else a["micro"],
            micro_defined=a["micro"] is not None,
        )
    roc = None if doc["roc"] is None else tuple(tuple(tuple(p) for p in pts) for pts in doc["roc"])
    pr = None if doc["pr"] is None else tuple(tuple(tuple(p) for p in pts) for pts in doc["pr"])
    return MetricsReport(cm, tuple(doc["class_names"]), per, avg, auc=auc, roc=roc, pr=pr)


def render_report(report: MetricsReport, out_dir: str | Path, formats=("json", "csv")) -> list[Path]:
    """Write metrics.json and/or the two curve CSVs; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for fmt in formats:
        if fmt == "json":
            path = out / "metrics.json"
            path.write_text(report_to_json(report), encoding="utf-8")
            written.append(path)
        elif fmt == "csv":
            for stem, curves, cols in (
                ("roc_curves", report.roc, ("class", "fpr", "tpr")),
                ("pr_curves", report.pr, ("class", "recall", "precision")),
            ):
                path = out / f"{stem}.csv"
                with open(path, "w", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(cols)
                    for c, pts in enumerate(curves or ()):
                        for x, y in pts:
                            writer.writerow([report.class_names[c], repr(x), repr(y)])
                written.append(path)
        else:
            raise ValueError(f"unknown report format {fmt!r} (json or csv expected)")
    return written
