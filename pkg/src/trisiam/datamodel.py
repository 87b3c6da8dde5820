"""Sample manifests, patient-aware splits, triplet sampling, k-fold partitions.

A manifest is an ordered class list plus a list of records, loaded from CSV
with header ``id,path,label,patient_id``. Labels in the file are class names;
records carry the class index. All randomized operations take an explicit
seed and draw from the repo's documented splitmix generator, so every split
and triplet list can be reproduced exactly from (manifest, seed, params).

Splitting is patient-aware: patients are shuffled by the seeded generator
and assigned greedily to the test side until its record count first reaches
test_fraction * total, which keeps any one patient's slices on a single side.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .rng import SplitMix64

MANIFEST_COLUMNS = ("id", "path", "label", "patient_id")
TRIPLET_COLUMNS = ("anchor_id", "positive_id", "negative_id")


class ManifestError(ValueError):
    """Raised for malformed manifest or triplet files, naming the row."""


@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: str
    label: int
    patient_id: str


@dataclass(frozen=True)
class Manifest:
    classes: tuple[str, ...]
    records: tuple[SampleRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def record_by_id(self, sample_id: str) -> SampleRecord:
        for rec in self.records:
            if rec.id == sample_id:
                return rec
        raise KeyError(sample_id)

    def indices_by_label(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, rec in enumerate(self.records):
            groups.setdefault(rec.label, []).append(i)
        return groups

    def patients(self) -> list[str]:
        """Distinct patient ids in first-appearance order."""
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.patient_id)
        return list(seen)

    def validate(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        ids = set()
        for rec in self.records:
            if rec.id in ids:
                raise ValueError(f"duplicate sample id {rec.id!r}")
            ids.add(rec.id)
            if not 0 <= rec.label < len(self.classes):
                raise ValueError(
                    f"sample {rec.id!r}: label {rec.label} outside [0, {len(self.classes)})"
                )


@dataclass(frozen=True)
class Triplet:
    anchor_id: str
    positive_id: str
    negative_id: str


def load_manifest(path: str | Path, classes: list[str] | None = None) -> Manifest:
    """Read a manifest CSV.

    When classes is given, every label in the file must be one of them and
    indices follow that order; otherwise the class list is the distinct
    labels in first-appearance order. Duplicate ids, unknown classes, and
    missing columns raise ManifestError naming the offending row.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        class_order: list[str] = list(classes) if classes is not None else []
        if classes is not None and len(set(class_order)) != len(class_order):
            raise ManifestError(f"{path}: class list has duplicates")
        index_of = {name: i for i, name in enumerate(class_order)}
        records: list[SampleRecord] = []
        first_row_of: dict[str, int] = {}
        for row in reader:
            rownum = reader.line_num
            values = [row.get(c) for c in MANIFEST_COLUMNS]
            if any(v is None or v == "" for v in values):
                raise ManifestError(f"{path}: row {rownum}: empty or missing field")
            sid, spath, label_name, patient = values
            if sid in first_row_of:
                raise ManifestError(
                    f"{path}: row {rownum}: duplicate id {sid!r} "
                    f"(first seen at row {first_row_of[sid]})"
                )
            first_row_of[sid] = rownum
            if label_name not in index_of:
                if classes is not None:
                    raise ManifestError(
                        f"{path}: row {rownum}: unknown class {label_name!r} "
                        f"(expected one of {', '.join(class_order)})"
                    )
                index_of[label_name] = len(class_order)
                class_order.append(label_name)
            records.append(SampleRecord(sid, spath, index_of[label_name], patient))
    manifest = Manifest(tuple(class_order), tuple(records))
    manifest.validate()
    return manifest


def save_manifest(m: Manifest, path: str | Path) -> None:
    """Write records back out with labels as class names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in m.records:
            writer.writerow([rec.id, rec.path, m.classes[rec.label], rec.patient_id])


def _subset(m: Manifest, keep: set[str]) -> Manifest:
    """Records whose patient is in keep, original order, same class list."""
    return Manifest(m.classes, tuple(r for r in m.records if r.patient_id in keep))


def patient_aware_split(
    m: Manifest, test_fraction: float, seed: int
) -> tuple[Manifest, Manifest]:
    """Split so no patient appears on both sides.

    Patients (first-appearance order) are shuffled with SplitMix64(seed) and
    assigned to test in shuffled order until the test record count first
    reaches test_fraction * total; the rest are train.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    patients = m.patients()
    if len(patients) < 2:
        raise ValueError(
            f"need at least 2 patients to split, found {len(patients)}"
        )
    per_patient: dict[str, int] = {}
    for rec in m.records:
        per_patient[rec.patient_id] = per_patient.get(rec.patient_id, 0) + 1

    SplitMix64(seed).shuffle(patients)
    threshold = test_fraction * len(m.records)
    test_patients: set[str] = set()
    count = 0
    for p in patients:
        if count >= threshold:
            break
        test_patients.add(p)
        count += per_patient[p]
    if len(test_patients) == len(patients):
        raise ValueError(
            "test fraction leaves no patients for training; lower test_fraction"
        )
    train_patients = set(patients) - test_patients
    return _subset(m, train_patients), _subset(m, test_patients)


def sample_triplets(
    m: Manifest, n: int, seed: int, same_patient_positive: bool = False
) -> list[Triplet]:
    """Draw n anchor/positive/negative triplets by seeded uniform sampling.

    Per triplet: the anchor is uniform over all records, the positive uniform
    over the anchor's class (and patient, when same_patient_positive) minus
    the anchor itself, the negative uniform over every other class. Candidate
    pools are ordered by manifest position, so a seed pins the exact output.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    by_label = m.indices_by_label()
    if len(by_label) < 2:
        raise ValueError(
            f"triplet sampling needs >= 2 classes, manifest has {len(by_label)}"
        )
    for label, idxs in sorted(by_label.items()):
        if len(idxs) < 2:
            raise ValueError(
                f"class {m.classes[label]!r} has {len(idxs)} sample(s), need >= 2"
            )
    pos_pool: dict[tuple, list[int]]
    if same_patient_positive:
        pos_pool = {}
        for i, rec in enumerate(m.records):
            pos_pool.setdefault((rec.patient_id, rec.label), []).append(i)
        for (patient, label), idxs in sorted(pos_pool.items()):
            if len(idxs) < 2:
                raise ValueError(
                    f"patient {patient!r} has {len(idxs)} sample(s) of class "
                    f"{m.classes[label]!r}, need >= 2 for same-patient positives"
                )
    else:
        pos_pool = {(None, label): idxs for label, idxs in by_label.items()}

    neg_pool = {
        label: [i for i, rec in enumerate(m.records) if rec.label != label]
        for label in by_label
    }

    g = SplitMix64(seed)
    out: list[Triplet] = []
    for _ in range(n):
        a = g.next_below(len(m.records))
        anchor = m.records[a]
        key = (anchor.patient_id if same_patient_positive else None, anchor.label)
        candidates = [i for i in pos_pool[key] if i != a]
        p = candidates[g.next_below(len(candidates))]
        negs = neg_pool[anchor.label]
        q = negs[g.next_below(len(negs))]
        out.append(Triplet(anchor.id, m.records[p].id, m.records[q].id))
    return out


def kfold(
    m: Manifest, k: int, seed: int, patient_aware: bool = False
) -> list[tuple[Manifest, Manifest]]:
    """k (train, validation) pairs with disjoint validations covering m.

    Assignment is round-robin over a seeded shuffle: shuffled item j lands in
    validation fold j mod k, where items are patients when patient_aware and
    individual records otherwise. Fold sizes therefore differ by at most one
    item.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if patient_aware:
        patients = m.patients()
        if k > len(patients):
            raise ValueError(f"k={k} exceeds patient count {len(patients)}")
        SplitMix64(seed).shuffle(patients)
        fold_of_patient = {p: j % k for j, p in enumerate(patients)}
        fold_of_record = [fold_of_patient[rec.patient_id] for rec in m.records]
    else:
        if k > len(m.records):
            raise ValueError(f"k={k} exceeds record count {len(m.records)}")
        order = list(range(len(m.records)))
        SplitMix64(seed).shuffle(order)
        fold_of_record = [0] * len(m.records)
        for j, idx in enumerate(order):
            fold_of_record[idx] = j % k

    folds = []
    for fold in range(k):
        val = tuple(r for r, f in zip(m.records, fold_of_record) if f == fold)
        train = tuple(r for r, f in zip(m.records, fold_of_record) if f != fold)
        folds.append((Manifest(m.classes, train), Manifest(m.classes, val)))
    return folds


def write_triplets(triplets: list[Triplet], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIPLET_COLUMNS)
        for t in triplets:
            writer.writerow([t.anchor_id, t.positive_id, t.negative_id])


def read_triplets(path: str | Path) -> list[Triplet]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in TRIPLET_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        out = []
        for row in reader:
            values = [row.get(c) for c in TRIPLET_COLUMNS]
            if any(v is None or v == "" for v in values):
                raise ManifestError(
                    f"{path}: row {reader.line_num}: empty or missing field"
                )
            out.append(Triplet(*values))
    return out


def check_triplets(triplets: list[Triplet], m: Manifest) -> None:
    """Validate every triplet's class and identity constraints against m."""
    by_id = {rec.id: rec for rec in m.records}
    for i, t in enumerate(triplets):
        for sid in (t.anchor_id, t.positive_id, t.negative_id):
            if sid not in by_id:
                raise ValueError(f"triplet {i}: unknown sample id {sid!r}")
        a, p, q = by_id[t.anchor_id], by_id[t.positive_id], by_id[t.negative_id]
        if t.anchor_id == t.positive_id:
            raise ValueError(f"triplet {i}: anchor and positive are the same sample")
        if a.label != p.label:
            raise ValueError(f"triplet {i}: anchor and positive class differ")
        if a.label == q.label:
            raise ValueError(f"triplet {i}: negative shares the anchor class")
