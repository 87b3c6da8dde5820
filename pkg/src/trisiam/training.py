"""Adam training of the unfrozen parameters under the triplet objective.

The loop is deliberately plain: seeded shuffle, fixed-size batches, one Adam
step per batch with decoupled weight decay applied before the update, then a
full evaluation pass at the end of every epoch. Recording epoch losses by a
canonical evaluation (fixed order, fixed chunking) rather than a running
average makes histories bit-reproducible and keeps the zero-learning-rate
case exactly constant.

Plateau reduction and early stopping are pure replays of the recorded
validation losses, so both can be recomputed from a history file and neither
carries hidden state. Wall-clock seconds are recorded only when
cfg.record_seconds is set; the default writes 0.0 so that rerunning a seed
reproduces every artifact byte for byte.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datamodel import Manifest, Triplet, kfold, sample_triplets
from .diffcore import Tensor, no_grad
from .ensemble import EnsembleModel, input_kind, pixels_to_input, triplet_forward
from .fewshot import batch_evaluate, build_support_set
from .imgproc import RasterImage
from .losses import LossConfig, margin_ranking_loss
from .metrics import MetricsReport
from .rng import SplitMix64, derive_seed

LR_FLOOR = 1e-8

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    record_seconds: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {beta}")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.min_delta < 0:
            raise ValueError(f"min_delta must be >= 0, got {self.min_delta}")
        self.loss.validate()


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss: float, val_loss: float, lr: float, seconds: float) -> None:
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.lr.append(float(lr))
        self.seconds.append(float(seconds))

    def validate(self) -> None:
        n = len(self.train_loss)
        if not (len(self.val_loss) == len(self.lr) == len(self.seconds) == n):
            raise ValueError("history columns must have equal length")
        for a, b in zip(self.lr, self.lr[1:]):
            if b > a:
                raise ValueError(f"learning rate increased from {a} to {b}")


def write_history(history: TrainHistory, path: str | Path) -> None:
    history.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for e in range(len(history)):
            writer.writerow(
                [
                    e + 1,
                    repr(history.train_loss[e]),
                    repr(history.val_loss[e]),
                    repr(history.lr[e]),
                    repr(history.seconds[e]),
                ]
            )


def read_history(path: str | Path) -> TrainHistory:
    path = Path(path)
    history = TrainHistory()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in HISTORY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            history.append(
                float(row["train_loss"]), float(row["val_loss"]), float(row["lr"]), float(row["seconds"])
            )
    history.validate()
    return history


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """One Adam update with bias correction, in place.

    Decoupled weight decay shrinks each value before its Adam update. Frozen
    parameters are skipped entirely. Any non-finite gradient aborts the step
    before anything has been touched.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    lr = cfg.learning_rate if lr is None else lr
    live = []
    for p, g in zip(params, grads):
        if p.frozen:
            continue
        if g is None:
            raise ValueError(f"missing gradient for parameter {p.name!r}")
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"parameter {p.name!r}: gradient shape {g.shape} != value shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {p.name!r}")
        live.append((p, g.astype(p.data.dtype, copy=False)))

    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g in live:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        if cfg.weight_decay:
            p.data -= (lr * cfg.weight_decay) * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


# ---------------------------------------------------------------------------
# schedules


def reduce_lr_on_plateau(history: TrainHistory, cfg: TrainConfig) -> float:
    """Replay the plateau rule over the recorded validation losses.

    Each time the loss fails to improve on the best seen by more than
    min_delta for plateau_patience consecutive epochs, the rate is scaled by
    plateau_factor (never below LR_FLOOR) and the stagnation count restarts.
    """
    if not history.val_loss:
        raise ValueError("plateau schedule needs at least one completed epoch")
    lr = cfg.learning_rate
    best = np.inf
    wait = 0
    for v in history.val_loss:
        if v < best - cfg.min_delta:
            best = v
            wait = 0
        else:
            wait += 1
            if wait >= cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, LR_FLOOR)
                wait = 0
    return lr


def should_stop_early(history: TrainHistory, cfg: TrainConfig) -> bool:
    """True when the validation loss has gone early_stop_patience epochs
    without improving on the best seen by more than min_delta."""
    if not history.val_loss:
        raise ValueError("early stopping needs at least one completed epoch")
    best = np.inf
    wait = 0
    for v in history.val_loss:
        if v < best - cfg.min_delta:
            best = v
            wait = 0
        else:
            wait += 1
    return wait >= cfg.early_stop_patience


# ---------------------------------------------------------------------------
# batch plumbing


def _as_plane(value) -> np.ndarray:
    if isinstance(value, RasterImage):
        value = value.pixels
    arr = pixels_to_input(value)
    if arr.ndim != 2:
        raise ValueError(f"expected a (H, W) image plane, got shape {arr.shape}")
    return arr


def _batch_input(kind: str, ids: list[str], images):
    if kind == "id":
        return list(ids)
    if images is None:
        raise ValueError("image-input models need an images mapping (sample id -> pixels)")
    planes = []
    for sid in ids:
        if sid not in images:
            raise KeyError(f"no image provided for sample id {sid!r}")
        planes.append(_as_plane(images[sid]))
    return Tensor(np.stack(planes)[:, None, :, :])


def evaluate_loss(model: EnsembleModel, triplets, cfg: TrainConfig, images=None) -> float:
    """Mean per-triplet loss in the given order with cfg.batch_size chunks."""
    triplets = list(triplets)
    if not triplets:
        raise ValueError("cannot evaluate an empty triplet set")
    kind = input_kind(model)
    values = np.empty(len(triplets), dtype=np.float64)
    with no_grad():
        for lo in range(0, len(triplets), cfg.batch_size):
            chunk = triplets[lo : lo + cfg.batch_size]
            a = _batch_input(kind, [t.anchor_id for t in chunk], images)
            p = _batch_input(kind, [t.positive_id for t in chunk], images)
            n = _batch_input(kind, [t.negative_id for t in chunk], images)
            d_ap, d_an = triplet_forward(model, a, p, n, cfg.loss)
            per = margin_ranking_loss(d_ap, d_an, -1, cfg.loss.margin)
            values[lo : lo + len(chunk)] = np.atleast_1d(per.data)
    return float(values.mean())


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class BestSnapshot:
    epoch: int
    val_loss: float
    params: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: EnsembleModel
    history: TrainHistory
    best: BestSnapshot


def restore_snapshot(model: EnsembleModel, best: BestSnapshot) -> None:
    for p in model.parameters():
        if p.name not in best.params:
            raise KeyError(f"snapshot has no entry for parameter {p.name!r}")
        p.data[...] = best.params[p.name]


def train_triplet(
    model: EnsembleModel,
    triplets,
    validation_triplets,
    cfg: TrainConfig,
    images=None,
) -> TrainResult:
    """Optimize the model's unfrozen parameters; fully pinned by cfg.seed.

    The batch objective is always the mean triplet loss (cfg.loss.reduction
    applies where the losses are called directly). Returns the trained model,
    the per-epoch history, and a snapshot of the best-validation epoch.
    """
    cfg.validate()
    triplets = list(triplets)
    validation_triplets = list(validation_triplets)
    if not triplets or not validation_triplets:
        raise ValueError("training and validation triplet sets must be non-empty")
    params = model.parameters()
    if all(p.frozen for p in params):
        raise ValueError("model has no trainable parameters")

    kind = input_kind(model)
    order_rng = SplitMix64(derive_seed(cfg.seed, "train.shuffle"))
    state = AdamState()
    history = TrainHistory()
    lr = cfg.learning_rate
    best: BestSnapshot | None = None

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = list(range(len(triplets)))
        order_rng.shuffle(order)
        for b0 in range(0, len(order), cfg.batch_size):
            batch_index = b0 // cfg.batch_size
            chunk = [triplets[i] for i in order[b0 : b0 + cfg.batch_size]]
            a = _batch_input(kind, [t.anchor_id for t in chunk], images)
            p = _batch_input(kind, [t.positive_id for t in chunk], images)
            n = _batch_input(kind, [t.negative_id for t in chunk], images)
            for prm in params:
                prm.zero_grad()
            try:
                d_ap, d_an = triplet_forward(model, a, p, n, cfg.loss)
                loss = margin_ranking_loss(d_ap, d_an, -1, cfg.loss.margin).mean()
                loss.backward()
                adam_step(params, [prm.grad for prm in params], state, cfg, lr=lr)
            except (FloatingPointError, ValueError) as exc:
                raise RuntimeError(f"epoch {epoch} batch {batch_index}: {exc}") from exc

        train_loss = evaluate_loss(model, triplets, cfg, images)
        val_loss = evaluate_loss(model, validation_triplets, cfg, images)
        seconds = time.perf_counter() - t0 if cfg.record_seconds else 0.0
        history.append(train_loss, val_loss, lr, seconds)
        if best is None or val_loss < best.val_loss:
            best = BestSnapshot(epoch, val_loss, {prm.name: prm.data.copy() for prm in params})
        lr = reduce_lr_on_plateau(history, cfg)
        if should_stop_early(history, cfg):
            break

    history.validate()
    return TrainResult(model=model, history=history, best=best)


# ---------------------------------------------------------------------------
# k-fold orchestration


@dataclass
class FoldResult:
    history: TrainHistory
    report: MetricsReport


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    accuracy_mean: float
    accuracy_std: float
    macro_f1_mean: float
    macro_f1_std: float


def cross_validate(
    manifest: Manifest,
    k: int,
    cfg: TrainConfig,
    model_factory,
    n_train_triplets: int,
    n_val_triplets: int,
    images=None,
    rule: str = "nearest",
    patient_aware: bool = False,
    same_patient_positive: bool = False,
) -> CrossValResult:
    """Train a fresh seeded model per fold and evaluate on the held-out part.

    model_factory(seed) must return a new EnsembleModel. Each fold trains on
    triplets sampled from its training split, restores the best-validation
    snapshot, then classifies the held-out records against a support set
    built from the training records. A failing fold aborts the whole run
    with its index.
    """
    folds = kfold(manifest, k, cfg.seed, patient_aware=patient_aware)
    results: list[FoldResult] = []
    for j, (train_m, val_m) in enumerate(folds):
        try:
            model = model_factory(derive_seed(cfg.seed, f"fold.{j}.model"))
            tri_train = sample_triplets(
                train_m, n_train_triplets, derive_seed(cfg.seed, f"fold.{j}.train_triplets"),
                same_patient_positive=same_patient_positive,
            )
            tri_val = sample_triplets(
                val_m, n_val_triplets, derive_seed(cfg.seed, f"fold.{j}.val_triplets"),
                same_patient_positive=same_patient_positive,
            )
            fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, f"fold.{j}.train"))
            outcome = train_triplet(model, tri_train, tri_val, fold_cfg, images=images)
            restore_snapshot(model, outcome.best)
            support = build_support_set(model, train_m, images=images)
            _, report = batch_evaluate(model, val_m, support, rule=rule, images=images)
            results.append(FoldResult(history=outcome.history, report=report))
        except Exception as exc:
            raise RuntimeError(f"cross-validation fold {j} failed: {exc}") from exc

    accs = np.array([f.report.accuracy for f in results], dtype=np.float64)
    f1s = np.array([f.report.averages.macro.f1 for f in results], dtype=np.float64)
    return CrossValResult(
        folds=results,
        accuracy_mean=float(accs.mean()),
        accuracy_std=float(accs.std()),
        macro_f1_mean=float(f1s.mean()),
        macro_f1_std=float(f1s.std()),
    )
