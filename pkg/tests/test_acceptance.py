"""Acceptance checks: one test per advertised guarantee of the package.

Each test prints a single [PASS]/[FAIL] verdict line, so
``pytest tests/test_acceptance.py -s`` reads as a checklist. Every check
here is an end-to-end statement about behaviour (exact parameter counts,
gradient correctness, oracle-matched metrics, reproducible pipelines);
the per-module suites cover the fine-grained edge cases.
"""

import time
from contextlib import contextmanager

import numpy as np

from trisiam.datamodel import (
    Manifest,
    SampleRecord,
    kfold,
    patient_aware_split,
    sample_triplets,
)
from trisiam.diffcore import (
    Parameter,
    absolute,
    add,
    concat,
    conv2d,
    div,
    exp,
    flatten,
    global_avg_pool,
    grad_check,
    linear,
    log,
    max_pool2d,
    mul,
    neg,
    power,
    relu,
    reshape,
    sub,
    take,
    tmean,
    tsum,
)
from trisiam.ensemble import (
    build_ensemble,
    build_external_branch,
    build_toy_encoder,
    count_parameters,
)
from trisiam.fewshot import batch_evaluate, build_support_set
from trisiam.imgproc import (
    PreprocessConfig,
    RasterImage,
    auto_brightness_contrast,
    preprocess,
    remove_background,
    unsharp_mask,
)
from trisiam.losses import (
    LossConfig,
    cross_entropy,
    focal_loss,
    margin_ranking_loss,
    pairwise_distance,
    softmax,
    triplet_objective,
)
from trisiam.metrics import (
    averaged_metrics,
    class_metrics,
    confusion,
    one_vs_rest,
    roc_auc,
)
from trisiam.rng import SplitMix64, derive_seed, uniform_array
from trisiam.synthetic import make_samples
from trisiam.training import TrainConfig, evaluate_loss, train_triplet, write_history


@contextmanager
def verdict(label: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {label}")
        raise
    print(f"[PASS] {label}")


def _vec(seed: int, n: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return uniform_array(seed, n, lo, hi)


def _away(seed: int, n: int, gap: float, top: float = 1.0) -> np.ndarray:
    """Values with |x| in [gap, top]; keeps kinked ops away from their kinks."""
    mag = uniform_array(derive_seed(seed, "mag"), n, gap, top)
    sign = np.where(uniform_array(derive_seed(seed, "sign"), n, 0.0, 1.0) < 0.5, -1.0, 1.0)
    return mag * sign


def _u8_noise(seed: int, h: int, w: int | None = None) -> np.ndarray:
    w = h if w is None else w
    return np.floor(uniform_array(seed, h * w, 0.0, 256.0)).astype(np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# 1. parameter accounting


def test_parameter_accounting():
    with verdict("parameter accounting: six external branches + fusion"):
        t0 = time.perf_counter()
        widths = (2048, 1024, 1024, 1280, 1280, 2048)
        branches = [
            build_external_branch(w, {"stub": np.zeros(w, dtype=np.float32)}, name=f"net{i}", seed=i)
            for i, w in enumerate(widths)
        ]
        model = build_ensemble(branches, seed=0)
        total, trainable = count_parameters(model)
        # heads: 512 * (sum of widths + 6 biases); fusion: 512 * (6*512) + 512
        assert trainable == 6032896
        assert total == 6032896
        fusion = model.fusion_w.data.size + model.fusion_b.data.size
        assert fusion == 1573376
        assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. gradient suite
#
# Every primitive and loss is run through grad_check over 50 seeds. Inputs
# are drawn away from non-differentiable points (|x| bounded below for
# absolute/relu/max hinges, distinct pool entries, positive power bases) so
# central differences measure the true derivative.


def _gc_add(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    b = Parameter(_vec(derive_seed(seed, "b"), 4), name="b")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(add(a, b), w)), [a, b]


def _gc_sub(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    b = Parameter(_vec(derive_seed(seed, "b"), 4), name="b")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(sub(a, b), w)), [a, b]


def _gc_mul(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    b = Parameter(_vec(derive_seed(seed, "b"), 4), name="b")
    return lambda: tsum(mul(a, b)), [a, b]


def _gc_div(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    b = Parameter(_away(derive_seed(seed, "b"), 4, 0.5, 1.5), name="b")
    return lambda: tsum(div(a, b)), [a, b]


def _gc_neg(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(neg(a), w)), [a]


def _gc_power(seed, trial):
    k = (1.7, 2.0, 3.0)[trial % 3]
    a = Parameter(_vec(derive_seed(seed, "a"), 4, 0.4, 1.6), name="a")
    return lambda: tsum(power(a, k)), [a]


def _gc_absolute(seed, trial):
    a = Parameter(_away(derive_seed(seed, "a"), 4, 0.15), name="a")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(absolute(a), w)), [a]


def _gc_log(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4, 0.5, 2.0), name="a")
    return lambda: tsum(log(a)), [a]


def _gc_exp(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 4), name="a")
    return lambda: tsum(exp(a)), [a]


def _gc_relu(seed, trial):
    a = Parameter(_away(derive_seed(seed, "a"), 4, 0.15), name="a")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(relu(a), w)), [a]


def _gc_tsum(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 6).reshape(2, 3), name="a")
    w = _vec(derive_seed(seed, "w"), 2)
    return lambda: tsum(mul(tsum(a, axis=1), w)), [a]


def _gc_tmean(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 6).reshape(2, 3), name="a")
    w = _vec(derive_seed(seed, "w"), 3)
    return lambda: tsum(mul(tmean(a, axis=0), w)), [a]


def _gc_reshape(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 6), name="a")
    w = _vec(derive_seed(seed, "w"), 6).reshape(2, 3)
    return lambda: tsum(mul(reshape(a, (2, 3)), w)), [a]


def _gc_flatten(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 8).reshape(2, 2, 2), name="a")
    w = _vec(derive_seed(seed, "w"), 8).reshape(2, 4)
    return lambda: tsum(mul(flatten(a), w)), [a]


def _gc_take(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 6), name="a")
    w = _vec(derive_seed(seed, "w"), 3)
    return lambda: tsum(mul(take(a, [0, 2, 5]), w)), [a]


def _gc_concat(seed, trial):
    a = Parameter(_vec(derive_seed(seed, "a"), 6).reshape(2, 3), name="a")
    b = Parameter(_vec(derive_seed(seed, "b"), 3).reshape(1, 3), name="b")
    w = _vec(derive_seed(seed, "w"), 9).reshape(3, 3)
    return lambda: tsum(mul(concat([a, b], axis=0), w)), [a, b]


def _gc_linear(seed, trial):
    x = Parameter(_vec(derive_seed(seed, "x"), 6).reshape(2, 3), name="x")
    w = Parameter(_vec(derive_seed(seed, "w"), 12).reshape(4, 3), name="w")
    b = Parameter(_vec(derive_seed(seed, "b"), 4), name="b")
    c = _vec(derive_seed(seed, "c"), 8).reshape(2, 4)
    return lambda: tsum(mul(linear(x, w, b), c)), [x, w, b]


def _gc_conv2d(seed, trial):
    stride = (trial % 2) + 1
    out_side = (4 + 2 - 3) // stride + 1
    x = Parameter(_vec(derive_seed(seed, "x"), 16).reshape(1, 1, 4, 4), name="x")
    w = Parameter(_vec(derive_seed(seed, "w"), 18).reshape(2, 1, 3, 3), name="w")
    b = Parameter(_vec(derive_seed(seed, "b"), 2), name="b")
    c = _vec(derive_seed(seed, "c"), 2 * out_side * out_side).reshape(1, 2, out_side, out_side)
    return lambda: tsum(mul(conv2d(x, w, b, stride=stride, padding=1), c)), [x, w, b]


def _gc_max_pool2d(seed, trial):
    # well-separated entries so an eps nudge never changes which cell wins
    order = list(range(16))
    SplitMix64(derive_seed(seed, "perm")).shuffle(order)
    vals = np.array(order, dtype=np.float64) * 0.13
    vals += _vec(derive_seed(seed, "jit"), 16, 0.0, 0.01)
    x = Parameter(vals.reshape(1, 1, 4, 4), name="x")
    w = _vec(derive_seed(seed, "w"), 4).reshape(1, 1, 2, 2)
    return lambda: tsum(mul(max_pool2d(x, 2), w)), [x]


def _gc_global_avg_pool(seed, trial):
    x = Parameter(_vec(derive_seed(seed, "x"), 32).reshape(1, 2, 4, 4), name="x")
    w = _vec(derive_seed(seed, "w"), 2).reshape(1, 2)
    return lambda: tsum(mul(global_avg_pool(x), w)), [x]


def _gc_pairwise_distance(seed, trial):
    p = (1.5, 2.0, 3.0)[trial % 3]
    u = Parameter(_vec(derive_seed(seed, "u"), 10).reshape(2, 5), name="u")
    v = Parameter(u.data + _away(derive_seed(seed, "gap"), 10, 0.3).reshape(2, 5), name="v")
    return lambda: tsum(pairwise_distance(u, v, p, 1e-6)), [u, v]


def _gc_margin_ranking(seed, trial):
    y = -1 if trial % 2 else 1
    x1 = Parameter(_vec(derive_seed(seed, "x1"), 4), name="x1")
    # |x1 - x2| in [0.7, 1.3] keeps the hinge argument at least 0.2 from zero
    x2 = Parameter(x1.data - _away(derive_seed(seed, "gap"), 4, 0.7, 1.3), name="x2")
    w = _vec(derive_seed(seed, "w"), 4)
    return lambda: tsum(mul(margin_ranking_loss(x1, x2, y, 0.5), w)), [x1, x2]


def _gc_triplet_objective(seed, trial):
    # margin 5 with unit-box embeddings keeps every hinge strictly active
    cfg = LossConfig(margin=5.0)
    e_a = Parameter(_vec(derive_seed(seed, "a"), 8).reshape(2, 4), name="a")
    e_p = Parameter(_vec(derive_seed(seed, "p"), 8).reshape(2, 4), name="p")
    e_n = Parameter(_vec(derive_seed(seed, "n"), 8).reshape(2, 4), name="n")
    return lambda: triplet_objective(e_a, e_p, e_n, cfg), [e_a, e_p, e_n]


def _gc_focal_loss(seed, trial):
    gamma = (0.0, 0.5, 2.0)[trial % 3]
    alpha = None if trial % 2 else tuple(_vec(derive_seed(seed, "al"), 4, 0.3, 1.0))
    logits = Parameter(_vec(derive_seed(seed, "lg"), 4), name="lg")
    target = trial % 4
    return lambda: focal_loss(softmax(logits), target, alpha, gamma), [logits]


GRAD_CASES = [
    ("add", _gc_add),
    ("sub", _gc_sub),
    ("mul", _gc_mul),
    ("div", _gc_div),
    ("neg", _gc_neg),
    ("power", _gc_power),
    ("absolute", _gc_absolute),
    ("log", _gc_log),
    ("exp", _gc_exp),
    ("relu", _gc_relu),
    ("tsum", _gc_tsum),
    ("tmean", _gc_tmean),
    ("reshape", _gc_reshape),
    ("flatten", _gc_flatten),
    ("take", _gc_take),
    ("concat", _gc_concat),
    ("linear", _gc_linear),
    ("conv2d", _gc_conv2d),
    ("max_pool2d", _gc_max_pool2d),
    ("global_avg_pool", _gc_global_avg_pool),
    ("pairwise_distance", _gc_pairwise_distance),
    ("margin_ranking_loss", _gc_margin_ranking),
    ("triplet_objective", _gc_triplet_objective),
    ("focal_loss", _gc_focal_loss),
]


def test_gradient_suite():
    with verdict("gradient checks: every primitive and loss, 50 seeds each"):
        t0 = time.perf_counter()
        for label, build in GRAD_CASES:
            for trial in range(50):
                fn, params = build(derive_seed(trial, f"grad.{label}"), trial)
                err = grad_check(fn, params)
                assert err < 1e-4, f"{label}[{trial}]: relative error {err}"
        assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------------
# 3. loss identities


def test_loss_identities():
    with verdict("loss identities: focal(gamma=0) == CE; ranking oracle exact"):
        for i in range(1000):
            g = SplitMix64(derive_seed(i, "acc.focal"))
            k = 2 + g.next_below(5)
            u = uniform_array(derive_seed(i, "acc.simplex"), k, 0.05, 1.0)
            probs = u / u.sum()
            target = g.next_below(k)
            fl = float(focal_loss(probs, target, alpha=None, gamma=0.0).data)
            ce = float(cross_entropy(probs, target).data)
            assert abs(fl - ce) <= 1e-12

        for i in range(1000):
            g = SplitMix64(derive_seed(i, "acc.rank"))
            n = 1 + g.next_below(8)
            x1 = uniform_array(derive_seed(i, "acc.x1"), n, -3.0, 3.0)
            x2 = uniform_array(derive_seed(i, "acc.x2"), n, -3.0, 3.0)
            margin = float(uniform_array(derive_seed(i, "acc.m"), 1, 0.0, 2.0)[0])
            y = -1 if i % 2 else 1
            out = margin_ranking_loss(x1, x2, y, margin)
            oracle = np.maximum(0.0, (x1 - x2) * float(-y) + margin)
            assert np.array_equal(out.data, oracle)


# ---------------------------------------------------------------------------
# 4. metrics vs brute-force oracles


def _pair_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    diff = pos[:, None] - neg[None, :]
    wins = np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
    return wins / (pos.size * neg.size)


def test_metrics_against_oracles():
    with verdict("metrics: confusion, averages, and AUC match oracles"):
        tol = 1e-12
        for case in range(200):
            g = SplitMix64(derive_seed(case, "acc.metrics"))
            k = 2 + g.next_below(4)
            n = 1 + g.next_below(100)
            true = np.array([g.next_below(k) for _ in range(n)], dtype=np.int64)
            pred = np.array([g.next_below(k) for _ in range(n)], dtype=np.int64)
            cm = confusion(true, pred, k)

            counts_o = np.zeros((k, k), dtype=np.int64)
            for t, p in zip(true, pred):
                counts_o[t, p] += 1
            assert np.array_equal(cm.counts, counts_o)

            per_prec, per_rec, per_f1, supports = [], [], [], []
            for c in range(k):
                tp = int(np.sum((true == c) & (pred == c)))
                fp = int(np.sum((true != c) & (pred == c)))
                fn = int(np.sum((true == c) & (pred != c)))
                tn = int(np.sum((true != c) & (pred != c)))
                assert one_vs_rest(cm, c) == (tp, fp, fn, tn)
                met = class_metrics(cm, c)
                prec = tp / (tp + fp) if tp + fp else 0.0
                rec = tp / (tp + fn) if tp + fn else 0.0
                f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
                spec = tn / (tn + fp) if tn + fp else 0.0
                acc = (tp + tn) / n
                assert abs(met.precision - prec) <= tol
                assert abs(met.recall - rec) <= tol
                assert abs(met.f1 - f1) <= tol
                assert abs(met.specificity - spec) <= tol
                assert abs(met.accuracy - acc) <= tol
                assert met.support == tp + fn
                per_prec.append(prec)
                per_rec.append(rec)
                per_f1.append(f1)
                supports.append(tp + fn)

            avg = averaged_metrics(cm)
            correct = int(np.sum(true == pred))
            assert abs(avg.micro.precision - correct / n) <= tol
            assert abs(avg.micro.recall - correct / n) <= tol
            assert abs(avg.micro.f1 - correct / n) <= tol
            # single-label identity, exact: micro F1 is the accuracy
            assert avg.micro.f1 == cm.accuracy()
            assert avg.accuracy == cm.accuracy()
            assert abs(avg.macro.precision - np.mean(per_prec)) <= tol
            assert abs(avg.macro.recall - np.mean(per_rec)) <= tol
            assert abs(avg.macro.f1 - np.mean(per_f1)) <= tol
            w = np.array(supports, dtype=np.float64) / n
            assert abs(avg.weighted.precision - w @ per_prec) <= tol
            assert abs(avg.weighted.recall - w @ per_rec) <= tol
            assert abs(avg.weighted.f1 - w @ per_f1) <= tol

        for case in range(200):
            g = SplitMix64(derive_seed(case, "acc.auc"))
            n = 2 + g.next_below(79)
            k = 2 + g.next_below(4)
            s = uniform_array(derive_seed(case, "acc.scores"), n * k, 0.0, 1.0).reshape(n, k)
            if case % 3 == 0:
                s = np.round(s * 8.0) / 8.0  # exact eighths force genuine ties
            t = np.array([g.next_below(k) for _ in range(n)], dtype=np.int64)
            summary = roc_auc(s, t)
            defined_vals = []
            for c in range(k):
                pos, neg = s[t == c, c], s[t != c, c]
                if pos.size and neg.size:
                    auc_o = _pair_auc(pos, neg)
                    assert summary.per_class[c] == auc_o
                    assert summary.per_class_defined[c]
                    defined_vals.append(auc_o)
                else:
                    assert summary.per_class[c] == 0.0
                    assert not summary.per_class_defined[c]
            macro_o = float(np.mean(defined_vals)) if defined_vals else 0.0
            assert summary.macro == macro_o
            assert summary.macro_defined == bool(defined_vals)
            onehot = t[:, None] == np.arange(k)[None, :]
            assert summary.micro == _pair_auc(s[onehot], s[~onehot])
            assert summary.micro_defined


# ---------------------------------------------------------------------------
# 5. preprocessing goldens


def test_preprocessing_goldens():
    with verdict("preprocessing: identities, stretch endpoints, disc mask"):
        cfg0 = PreprocessConfig(unsharp_amount=0.0)
        for i in range(100):
            side = 16 + (i % 17)
            px = _u8_noise(derive_seed(i, "acc.unsharp"), side)
            out = unsharp_mask(RasterImage(px), cfg0)
            assert np.array_equal(out.pixels, px)

        for i in range(100):
            px = _u8_noise(derive_seed(i, "acc.stretch"), 24)
            px[0, 0] = 3
            px[-1, -1] = 250
            res = auto_brightness_contrast(RasterImage(px), 0.0)
            assert res.warnings == ()
            assert int(res.image.pixels.min()) == 0
            assert int(res.image.pixels.max()) == 255

        size = 160
        yy, xx = np.ogrid[:size, :size]
        c = (size - 1) / 2.0
        disc = (yy - c) ** 2 + (xx - c) ** 2 <= 45.0**2
        scene = np.full((size, size), 4, dtype=np.uint8)
        scene[disc] = 200
        scene[8:12, 8:12] = 230  # speck the opening must discard
        res = remove_background(RasterImage(scene), PreprocessConfig())
        assert res.warnings == ()
        mask = res.mask.pixels > 0
        assert np.sum(mask & disc) >= 0.99 * disc.sum()
        assert np.sum(~mask & ~disc) >= 0.99 * (~disc).sum()
        res2 = remove_background(RasterImage(scene.copy()), PreprocessConfig())
        assert np.array_equal(res2.mask.pixels, res.mask.pixels)
        assert res2.box == res.box

        pcfg = PreprocessConfig(target_size=64)
        for i in range(20):
            px = _u8_noise(derive_seed(i, "acc.repro"), 40 + i)
            r1 = preprocess(RasterImage(px), pcfg)
            r2 = preprocess(RasterImage(px.copy()), pcfg)
            assert np.array_equal(r1.image.pixels, r2.image.pixels)
            assert r1.box == r2.box
            assert r1.alpha == r2.alpha and r1.beta == r2.beta
            assert r1.warnings == r2.warnings


# ---------------------------------------------------------------------------
# 6. end-to-end synthetic run


def _pipeline_run(tmp_path, tag: str):
    train_m, train_imgs = make_samples(40, seed=derive_seed(11, "data.train"), size=64, prefix="tr_")
    held_m, held_imgs = make_samples(110, seed=derive_seed(11, "data.test"), size=64, prefix="te_")
    tri = sample_triplets(train_m, 600, derive_seed(11, "triplets"))
    val = sample_triplets(train_m, 60, derive_seed(11, "triplets.val"))
    model = build_ensemble(
        [build_toy_encoder(derive_seed(11, "model.branch.toy"))],
        derive_seed(11, "model.fusion"),
    )
    cfg = TrainConfig(
        learning_rate=3e-4, batch_size=16, epochs=6, weight_decay=0.0,
        seed=derive_seed(11, "train"),
    )
    initial = evaluate_loss(model, tri, cfg, images=train_imgs)
    result = train_triplet(model, tri, val, cfg, images=train_imgs)

    by_label = train_m.indices_by_label()
    sel = tuple(
        train_m.records[i]
        for lab in range(len(train_m.classes))
        for i in by_label[lab][:5]
    )
    support = build_support_set(model, Manifest(train_m.classes, sel), images=train_imgs)
    evals, report = batch_evaluate(model, held_m, support, images=held_imgs)

    hist_path = tmp_path / f"history_{tag}.csv"
    write_history(result.history, hist_path)
    param_bytes = b"".join(p.data.tobytes() for p in model.parameters())
    return initial, result, evals, report, hist_path.read_bytes(), param_bytes


def test_end_to_end_synthetic_run(tmp_path):
    with verdict("end-to-end: 600-triplet training run and few-shot accuracy"):
        t0 = time.perf_counter()
        initial, result, evals, report, hist, params = _pipeline_run(tmp_path, "a")
        elapsed = time.perf_counter() - t0
        assert initial > 0
        assert len(result.history) <= 50
        assert min(result.history.train_loss) <= 0.5 * initial
        assert len(evals) >= 300
        assert report.averages.accuracy >= 0.90
        assert elapsed <= 300.0

        initial2, _, evals2, _, hist2, params2 = _pipeline_run(tmp_path, "b")
        assert initial2 == initial
        assert hist2 == hist
        assert params2 == params
        assert [e.prediction.label for e in evals2] == [e.prediction.label for e in evals]


# ---------------------------------------------------------------------------
# 7. protocol invariants


def _random_manifest(case: int) -> tuple[Manifest, SplitMix64]:
    g = SplitMix64(derive_seed(case, "acc.protocol"))
    k = 2 + g.next_below(3)
    recs = []
    for pi in range(4 + g.next_below(9)):
        for _ in range(1 + g.next_below(3)):
            recs.append(
                SampleRecord(f"s{len(recs)}", f"x/{len(recs)}.png", g.next_below(k), f"p{pi}")
            )
    counts = [0] * k
    for r in recs:
        counts[r.label] += 1
    extra = 0
    for lab in range(k):  # every class needs >= 2 records for triplets
        while counts[lab] < 2:
            recs.append(SampleRecord(f"f{extra}", f"x/f{extra}.png", lab, f"pf{extra}"))
            counts[lab] += 1
            extra += 1
    m = Manifest(tuple(f"c{j}" for j in range(k)), tuple(recs))
    m.validate()
    return m, g


def test_protocol_invariants():
    with verdict("protocol: splits, folds, freezing, schedule, triplets"):
        for case in range(500):
            m, g = _random_manifest(case)
            all_ids = sorted(r.id for r in m.records)

            frac = 0.25 + 0.2 * g.next_float()
            tr, te = patient_aware_split(m, frac, seed=derive_seed(case, "split"))
            tr_pat = {r.patient_id for r in tr.records}
            te_pat = {r.patient_id for r in te.records}
            assert tr_pat and te_pat and not (tr_pat & te_pat)
            assert sorted([r.id for r in tr.records] + [r.id for r in te.records]) == all_ids

            k_folds = 2 + g.next_below(3)
            folds = kfold(m, k_folds, seed=derive_seed(case, "fold"), patient_aware=True)
            val_ids, val_patient_sets = [], []
            for ftr, fva in folds:
                fp_tr = {r.patient_id for r in ftr.records}
                fp_va = {r.patient_id for r in fva.records}
                assert not (fp_tr & fp_va)
                val_ids.extend(r.id for r in fva.records)
                val_patient_sets.append(fp_va)
            assert sorted(val_ids) == all_ids
            assert sum(len(s) for s in val_patient_sets) == len(set().union(*val_patient_sets))

            by_id = {r.id: r for r in m.records}
            for t in sample_triplets(m, 20, seed=derive_seed(case, "tri")):
                assert t.anchor_id != t.positive_id
                assert by_id[t.anchor_id].label == by_id[t.positive_id].label
                assert by_id[t.negative_id].label != by_id[t.anchor_id].label

        # a frozen backbone stays bit-identical through a real training run
        fm, fimgs = make_samples(6, seed=31, size=48)
        ftri = sample_triplets(fm, 40, seed=32)
        fval = sample_triplets(fm, 12, seed=33)
        fmodel = build_ensemble([build_toy_encoder(41, backbone_frozen=True)], 42)
        frozen_before = [
            (p.name, p.data.tobytes()) for p in fmodel.parameters() if p.frozen
        ]
        assert frozen_before
        head_before = fmodel.branches[0].head_w.data.tobytes()
        fcfg = TrainConfig(
            learning_rate=0.01, batch_size=16, epochs=2, weight_decay=0.0,
            seed=43, loss=LossConfig(margin=5.0),
        )
        res = train_triplet(fmodel, ftri, fval, fcfg, images=fimgs)
        frozen_after = [p for p in fmodel.parameters() if p.frozen]
        for (name, before), p in zip(frozen_before, frozen_after):
            assert p.name == name and p.data.tobytes() == before
        assert fmodel.branches[0].head_w.data.tobytes() != head_before
        assert all(b <= a for a, b in zip(res.history.lr, res.history.lr[1:]))
        res.history.validate()
