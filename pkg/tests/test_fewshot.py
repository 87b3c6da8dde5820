"""Support sets, cosine decision rules, and batch evaluation.

classify_embedding is checked against plain-Python cosine arithmetic, and
batch evaluation against a brute-force nearest-neighbor sweep plus an
independent confusion tally over the emitted predictions.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from trisiam.datamodel import Manifest, SampleRecord
from trisiam.ensemble import build_ensemble, build_external_branch, build_toy_encoder, ensemble_forward
from trisiam.fewshot import (
    Prediction,
    SupportSet,
    batch_evaluate,
    build_support_set,
    classify,
    classify_embedding,
    embed_records,
    write_predictions,
)

# ---------------------------------------------------------------------------
# oracles and fixtures


def cos_oracle(u, v):
    num = sum(float(a) * float(b) for a, b in zip(u, v))
    nu = math.sqrt(sum(float(a) ** 2 for a in u))
    nv = math.sqrt(sum(float(b) ** 2 for b in v))
    return num / (nu * nv)


def hand_support():
    return SupportSet(
        classes=("left", "up"),
        ids=(("l1", "l2"), ("u1",)),
        embeddings=(
            np.array([[1.0, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]]),
            np.array([[0.0, 1.0, 0.0, 0.0]]),
        ),
    )


def make_manifest(n_per_class=2, classes=("a", "b", "c")):
    records = []
    for c, name in enumerate(classes):
        for j in range(n_per_class):
            records.append(
                SampleRecord(id=f"{name}{j}", path=f"{name}{j}.png", label=c, patient_id=f"p{name}{j}")
            )
    return Manifest(tuple(classes), tuple(records))


def id_model(manifest, width=16, seed=3, spread=5.0):
    """External-branch model whose table clusters records by class."""
    rng = np.random.default_rng(seed)
    table = {}
    for rec in manifest.records:
        base = np.zeros(width, dtype=np.float64)
        base[rec.label] = spread
        table[rec.id] = base + rng.uniform(-0.5, 0.5, size=width)
    branch = build_external_branch(width, table, name="ext", seed=seed)
    return build_ensemble([branch], seed=seed)


# ---------------------------------------------------------------------------
# SupportSet validation


def test_empty_class_rejected():
    with pytest.raises(ValueError, match="no support samples"):
        SupportSet(("a",), ((),), (np.zeros((0, 4)),))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="disagree on dimension"):
        SupportSet(
            ("a", "b"),
            (("a1",), ("b1",)),
            (np.ones((1, 4)), np.ones((1, 5))),
        )


def test_row_count_must_match_ids():
    with pytest.raises(ValueError, match="one row per id"):
        SupportSet(("a",), (("a1", "a2"),), (np.ones((3, 4)),))


def test_nonfinite_embedding_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        SupportSet(("a",), (("a1",),), (np.array([[np.inf, 0.0]]),))


# ---------------------------------------------------------------------------
# classify_embedding


def test_query_equal_to_support_sample():
    s = hand_support()
    pred = classify_embedding(np.array([0.9, 0.1, 0.0, 0.0]), s)
    assert pred.label == 0
    assert pred.nearest_support_id == "l2"
    assert pred.similarity == pytest.approx(1.0, abs=1e-12)


def test_small_tilt_picks_class_zero():
    s = SupportSet(
        ("x", "y"),
        (("x1",), ("y1",)),
        (np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0, 0.0]])),
    )
    q = np.array([1.0, 1e-6, 0.0, 0.0])
    pred = classify_embedding(q, s)
    assert pred.label == 0
    want0 = cos_oracle(q, [1, 0, 0, 0])
    want1 = cos_oracle(q, [0, 1, 0, 0])
    assert pred.scores[0] == pytest.approx(want0, abs=1e-12)
    assert pred.scores[1] == pytest.approx(want1, abs=1e-12)
    assert want0 > want1


def test_exact_tie_breaks_to_lower_class_index():
    s = SupportSet(
        ("x", "y"),
        (("x1",), ("y1",)),
        (np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0, 0.0]])),
    )
    pred = classify_embedding(np.array([1.0, 1.0, 0.0, 0.0]), s)
    assert pred.scores[0] == pred.scores[1]
    assert pred.label == 0


def test_within_class_tie_prefers_smaller_id():
    s = SupportSet(
        ("x",),
        (("z9", "a1"),),
        (np.array([[1.0, 0.0], [1.0, 0.0]]),),
    )
    pred = classify_embedding(np.array([2.0, 0.0]), s)
    assert pred.nearest_support_id == "a1"


def test_class_mean_rule_by_hand():
    s = SupportSet(
        ("x", "y"),
        (("x1", "x2"), ("y1",)),
        (np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([[0.0, 1.0]])),
    )
    q = np.array([1.0, 0.0])
    pred = classify_embedding(q, s, rule="class_mean")
    assert pred.scores[0] == pytest.approx(cos_oracle(q, [0.75, 0.25]), abs=1e-12)
    assert pred.scores[1] == pytest.approx(0.0, abs=1e-12)
    assert pred.label == 0
    assert pred.nearest_support_id == "x1"  # most similar sample of the winning class


def test_zero_norm_query_and_support_error():
    s = hand_support()
    with pytest.raises(ValueError, match="zero-norm query"):
        classify_embedding(np.zeros(4), s)
    bad = SupportSet(("x",), (("x1",),), (np.array([[0.0, 0.0]]),))
    with pytest.raises(ValueError, match="zero-norm support"):
        classify_embedding(np.array([1.0, 0.0]), bad)


def test_unknown_rule_rejected():
    with pytest.raises(ValueError, match="unknown rule"):
        classify_embedding(np.ones(4), hand_support(), rule="midpoint")


def test_dimension_check():
    with pytest.raises(ValueError, match="dimension"):
        classify_embedding(np.ones(3), hand_support())


@st.composite
def support_and_query(draw):
    dim = draw(st.integers(2, 6))
    k = draw(st.integers(2, 4))
    vals = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
    classes, ids, groups = [], [], []
    for c in range(k):
        n = draw(st.integers(1, 3))
        rows = np.array(draw(st.lists(st.lists(vals, min_size=dim, max_size=dim), min_size=n, max_size=n)))
        assume((rows * rows).sum(axis=1).min() > 1e-6)
        classes.append(f"c{c}")
        ids.append(tuple(f"c{c}s{j}" for j in range(n)))
        groups.append(rows)
    q = np.array(draw(st.lists(vals, min_size=dim, max_size=dim)))
    assume(float(q @ q) > 1e-6)
    return SupportSet(tuple(classes), tuple(ids), tuple(groups)), q


@given(support_and_query(), st.sampled_from(["nearest", "class_mean"]))
@settings(max_examples=100, deadline=None)
def test_label_is_argmax_under_tiebreak(case, rule):
    support, q = case
    pred = classify_embedding(q, support, rule=rule)
    best = 0
    for c in range(1, len(pred.scores)):
        if pred.scores[c] > pred.scores[best]:
            best = c
    assert pred.label == best
    assert -1.0 <= pred.similarity <= 1.0
    assert pred.similarity == pred.scores[pred.label]


@given(support_and_query(), st.integers(-8, 8))
@settings(max_examples=100, deadline=None)
def test_power_of_two_scaling_is_bitwise_invariant(case, e):
    support, q = case
    base = classify_embedding(q, support)
    scaled = classify_embedding(q * 2.0**e, support)
    assert scaled.scores == base.scores
    assert scaled.label == base.label
    assert scaled.nearest_support_id == base.nearest_support_id


@given(support_and_query(), st.floats(0.01, 100, allow_nan=False))
@settings(max_examples=100, deadline=None)
def test_general_positive_scaling_keeps_the_decision(case, c):
    support, q = case
    base = classify_embedding(q, support)
    scaled = classify_embedding(q * c, support)
    np.testing.assert_allclose(scaled.scores, base.scores, atol=1e-9)
    ranked = sorted(base.scores, reverse=True)
    if len(ranked) > 1 and ranked[0] - ranked[1] > 1e-6:
        assert scaled.label == base.label


def test_single_support_per_class_equals_brute_force_nn():
    rng = np.random.default_rng(17)
    for _ in range(100):
        k = int(rng.integers(2, 5))
        dim = int(rng.integers(2, 8))
        rows = rng.normal(size=(k, dim))
        support = SupportSet(
            tuple(f"c{c}" for c in range(k)),
            tuple((f"s{c}",) for c in range(k)),
            tuple(rows[c : c + 1] for c in range(k)),
        )
        q = rng.normal(size=dim)
        pred = classify_embedding(q, support)
        sims = [cos_oracle(q, rows[c]) for c in range(k)]
        assert pred.label == int(np.argmax(sims))


# ---------------------------------------------------------------------------
# support sets from a model


def test_support_set_groups_by_class():
    m = make_manifest(n_per_class=2)
    model = id_model(m)
    support = build_support_set(model, m)
    assert support.classes == ("a", "b", "c")
    assert [len(s) for s in support.ids] == [2, 2, 2]
    assert support.dim == 512
    assert support.n_samples == 6


def test_support_set_rebuild_is_bit_identical():
    m = make_manifest(n_per_class=3)
    model = id_model(m)
    s1 = build_support_set(model, m)
    s2 = build_support_set(model, m)
    assert s1.ids == s2.ids
    for a, b in zip(s1.embeddings, s2.embeddings):
        np.testing.assert_array_equal(a, b)


def test_support_embeddings_equal_forward_outputs():
    m = make_manifest(n_per_class=2)
    model = id_model(m)
    support = build_support_set(model, m)
    # same single batched call, so the rows must match bit for bit
    whole = ensemble_forward(model, [r.id for r in m.records]).data
    stacked = np.concatenate(support.embeddings, axis=0)
    np.testing.assert_array_equal(stacked, whole)


def test_missing_class_in_manifest_errors():
    two = make_manifest(classes=("a", "b"))
    m = Manifest(("a", "b", "ghost"), two.records)
    model = id_model(m)
    with pytest.raises(ValueError, match="ghost"):
        build_support_set(model, m)


def test_embed_records_chunking_is_consistent():
    m = make_manifest(n_per_class=4)
    model = id_model(m)
    full = embed_records(model, m.records, batch_size=64)
    assert full.shape == (12, 512)
    again = embed_records(model, m.records, batch_size=64)
    np.testing.assert_array_equal(full, again)


# ---------------------------------------------------------------------------
# classify through a model


def test_classify_by_sample_id():
    m = make_manifest(n_per_class=2)
    model = id_model(m)
    support = build_support_set(model, m)
    pred = classify(model, "b0", support)
    assert isinstance(pred, Prediction)
    assert pred.label == 1  # self-match dominates in a separated table
    assert pred.nearest_support_id == "b0"


def test_classify_image_scales_uint8():
    model = build_ensemble([build_toy_encoder(seed=11)], seed=11)
    rng = np.random.default_rng(4)
    plane = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    emb = ensemble_forward(model, plane.astype(np.float32) / np.float32(255.0)).data
    support = SupportSet(("one",), (("s1",),), (emb[None, :].astype(np.float64),))
    pred = classify(model, plane, support)
    assert pred.similarity == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# batch evaluation


def test_self_evaluation_is_perfect():
    m = make_manifest(n_per_class=5)
    model = id_model(m)
    support = build_support_set(model, m)
    records, report = batch_evaluate(model, m, support)
    assert report.accuracy == 1.0
    assert all(r.prediction.label == r.true_label for r in records)


def test_separable_set_beats_ninety_percent_and_matches_nn_oracle():
    train = make_manifest(n_per_class=10)
    model = id_model(train, spread=6.0)
    support = build_support_set(model, train)

    test_records = []
    rng = np.random.default_rng(23)
    for c, name in enumerate(train.classes):
        for j in range(10, 20):
            test_records.append(SampleRecord(f"{name}{j}", f"{name}{j}.png", c, f"pt{name}{j}"))
    # extend the branch table with fresh clustered vectors for the test ids
    branch = model.branches[0]
    for rec in test_records:
        base = np.zeros(16)
        base[rec.label] = 6.0
        branch.table[rec.id] = base + rng.uniform(-0.5, 0.5, size=16)
    test_m = Manifest(train.classes, tuple(test_records))

    records, report = batch_evaluate(model, test_m, support)
    assert report.accuracy >= 0.9

    sup_rows = np.concatenate(support.embeddings, axis=0).astype(np.float64)
    sup_labels = [c for c, sids in enumerate(support.ids) for _ in sids]
    emb = embed_records(model, test_m.records)
    for rec_out, q in zip(records, emb.astype(np.float64)):
        sims = [cos_oracle(q, row) for row in sup_rows]
        assert rec_out.prediction.label == sup_labels[int(np.argmax(sims))]

    # metrics agree with a hand tally over the emitted predictions
    k = len(train.classes)
    tally = np.zeros((k, k), dtype=np.int64)
    for r in records:
        tally[r.true_label, r.prediction.label] += 1
    np.testing.assert_array_equal(report.confusion.counts, tally)


def test_class_mismatch_rejected():
    m = make_manifest()
    model = id_model(m)
    support = build_support_set(model, m)
    other = Manifest(("a", "b"), tuple(r for r in m.records if r.label < 2))
    with pytest.raises(ValueError, match="support classes"):
        batch_evaluate(model, other, support)


def test_classify_error_names_the_sample():
    m = make_manifest()
    model = id_model(m)
    tiny = SupportSet(("a", "b", "c"), (("a0",), ("b0",), ("c0",)), tuple(np.ones((1, 4)) for _ in range(3)))
    with pytest.raises(ValueError, match="sample 'a0'"):
        batch_evaluate(model, m, tiny)


def test_write_predictions_layout(tmp_path):
    m = make_manifest(n_per_class=2)
    model = id_model(m)
    support = build_support_set(model, m)
    records, _ = batch_evaluate(model, m, support)
    path = tmp_path / "preds.csv"
    write_predictions(records, m.classes, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,true_label,pred_label,similarity,nearest_support_id,score_0,score_1,score_2"
    assert len(lines) == 1 + len(m.records)
    first = lines[1].split(",")
    assert first[0] == "a0"
    assert first[1] == "a" and first[2] == "a"
    assert float(first[3]) <= 1.0
