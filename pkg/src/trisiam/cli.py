"""Command-line driver: batch experiments from a single config file.

Every command reads a RunConfig (JSON or TOML), optionally overridden by
``--seed`` and ``--out``, and writes its artifacts plus a ``run_info.json``
recording the command, the seed, a sha256 digest of the resolved config,
and a sha256 of every input file. Outputs carry no timestamps, so a rerun
with the same config, seed, and inputs is byte-identical.

Exit codes:
  0  success (warnings never change the exit code)
  1  configuration, data, or runtime error (message on stderr)
  2  command-line usage error
  3  preprocess completed but skipped unreadable images (see the log CSV)

Set the TRISIAM_LOG environment variable (debug/info/warning/error) to
control log verbosity on stderr.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import os
import sys
from pathlib import Path

import click

from . import __version__
from .checkpoint import CheckpointError, load_into, save_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    build_model,
    config_digest,
    load_config,
)
from .datamodel import (
    Manifest,
    ManifestError,
    check_triplets,
    load_manifest,
    patient_aware_split,
    read_triplets,
    sample_triplets,
    save_manifest,
    write_triplets,
)
from .embfile import EmbFileError, file_sha256
from .ensemble import input_kind
from .fewshot import batch_evaluate, build_support_set, classify, write_predictions
from .imageio import ImageReadError, load_grayscale, save_png
from .imgproc import preprocess
from .metrics import render_report
from .rng import derive_seed
from .training import cross_validate, restore_snapshot, train_triplet, write_history

log = logging.getLogger("trisiam")

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

_CAUGHT = (
    ConfigError,
    ManifestError,
    EmbFileError,
    CheckpointError,
    ImageReadError,
    ValueError,
    KeyError,
    RuntimeError,
    OSError,
)


def _guard(fn):
    """Map internal errors to exit code 1 with the message preserved."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except _CAUGHT as exc:
            # OSError args start with errno; fall back to the full rendering
            msg = exc.args[0] if exc.args and isinstance(exc.args[0], str) else str(exc)
            raise click.ClickException(msg) from exc

    return wrapper


def _common(fn):
    fn = click.option("--config", "config_path", default=None, metavar="PATH",
                      help="Run configuration file (.json or .toml).")(fn)
    fn = click.option("--seed", default=None, type=int, help="Override the config seed.")(fn)
    fn = click.option("--out", "out_override", default=None, metavar="DIR",
                      help="Override the config output directory.")(fn)
    return fn


def _resolve_config(config_path, seed, out_override) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out_override is not None:
        updates["out_dir"] = out_override
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(cfg: RunConfig, field: str) -> Path:
    """A config path field that must be set and exist on disk."""
    value = getattr(cfg, field)
    if not value:
        raise click.ClickException(f"config field {field!r} is required for this command")
    path = Path(value)
    if not path.exists():
        raise click.ClickException(f"config field {field!r}: no such file: {path}")
    return path


def _write_run_info(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path]) -> None:
    info = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_digest": config_digest(cfg),
        "inputs": {
            name: {"path": str(p), "sha256": file_sha256(p)} for name, p in sorted(inputs.items())
        },
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", "utf-8")


def _load_images(cfg: RunConfig, manifests: list[Manifest]) -> dict:
    root = Path(cfg.image_root) if cfg.image_root else Path(".")
    images = {}
    for m in manifests:
        for rec in m.records:
            if rec.id not in images:
                images[rec.id] = load_grayscale(root / rec.path)
    return images


def _images_if_needed(model, cfg: RunConfig, manifests: list[Manifest]):
    return _load_images(cfg, manifests) if input_kind(model) == "image" else None


def _train_cfg(cfg: RunConfig):
    return dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train"))


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Triplet-ensemble experiments: preprocess, split, train, evaluate."""
    level = os.environ.get("TRISIAM_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING))


@main.command("preprocess")
@click.option("--in", "input_dir", required=True, metavar="DIR",
              type=click.Path(exists=True, file_okay=False))
@_common
@click.pass_context
@_guard
def cmd_preprocess(ctx, input_dir, config_path, seed, out_override) -> None:
    """Batch-preprocess every image in a directory.

    Writes one PNG per readable input plus preprocess_log.csv with columns
    id,left,top,right,bottom,alpha,beta,warnings,error. Unreadable files
    are logged
    and skipped; any skip turns the exit code to 3.
    """
    cfg = _resolve_config(config_path, seed, out_override)
    out = _out_dir(cfg)
    files = sorted(p for p in Path(input_dir).iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    rows = []
    n_skipped = 0
    for path in files:
        try:
            img = load_grayscale(path)
            res = preprocess(img, cfg.preprocess)
        except (ImageReadError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            rows.append([path.stem, "", "", "", "", "", "", "", str(exc)])
            n_skipped += 1
            continue
        save_png(res.image, out / f"{path.stem}.png")
        rows.append([
            path.stem,
            res.box.left, res.box.top, res.box.right, res.box.bottom,
            repr(res.alpha), repr(res.beta),
            ";".join(res.warnings), "",
        ])
    with open(out / "preprocess_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "left", "top", "right", "bottom", "alpha", "beta", "warnings", "error"]
        )
        writer.writerows(rows)
    _write_run_info(out, "preprocess", cfg, {})
    click.echo(f"{len(rows) - n_skipped} processed, {n_skipped} skipped -> {out}")
    if n_skipped:
        ctx.exit(3)


@main.command("split")
@_common
@_guard
def cmd_split(config_path, seed, out_override) -> None:
    """Patient-aware train/validation split of the manifest."""
    cfg = _resolve_config(config_path, seed, out_override)
    manifest_path = _need(cfg, "manifest")
    out = _out_dir(cfg)
    m = load_manifest(manifest_path)
    train_m, val_m = patient_aware_split(m, cfg.val_fraction, derive_seed(cfg.seed, "split"))
    save_manifest(train_m, out / "train.csv")
    save_manifest(val_m, out / "val.csv")
    _write_run_info(out, "split", cfg, {"manifest": manifest_path})
    click.echo(f"train {len(train_m.records)} / val {len(val_m.records)} records -> {out}")


@main.command("triplets")
@_common
@_guard
def cmd_triplets(config_path, seed, out_override) -> None:
    """Sample training and validation triplets from the manifest."""
    cfg = _resolve_config(config_path, seed, out_override)
    manifest_path = _need(cfg, "manifest")
    out = _out_dir(cfg)
    m = load_manifest(manifest_path)
    tri = sample_triplets(
        m, cfg.n_triplets, derive_seed(cfg.seed, "triplets"),
        same_patient_positive=cfg.same_patient_positive,
    )
    val = sample_triplets(
        m, cfg.n_val_triplets, derive_seed(cfg.seed, "triplets.val"),
        same_patient_positive=cfg.same_patient_positive,
    )
    write_triplets(tri, out / "triplets.csv")
    write_triplets(val, out / "val_triplets.csv")
    _write_run_info(out, "triplets", cfg, {"manifest": manifest_path})
    click.echo(f"{len(tri)} train / {len(val)} val triplets -> {out}")


@main.command("train")
@_common
@_guard
def cmd_train(config_path, seed, out_override) -> None:
    """Train the configured ensemble on triplet files.

    Writes history.csv, final.ckpt (end of training), best.ckpt plus
    best.json (lowest validation loss), and run_info.json.
    """
    cfg = _resolve_config(config_path, seed, out_override)
    manifest_path = _need(cfg, "manifest")
    tri_path = _need(cfg, "triplets_file")
    val_path = _need(cfg, "val_triplets_file")
    out = _out_dir(cfg)

    m = load_manifest(manifest_path)
    tri = read_triplets(tri_path)
    val = read_triplets(val_path)
    check_triplets(tri, m)
    check_triplets(val, m)

    model = build_model(cfg, cfg.seed)
    images = _images_if_needed(model, cfg, [m])
    result = train_triplet(model, tri, val, _train_cfg(cfg), images=images)

    write_history(result.history, out / "history.csv")
    save_checkpoint(model.parameters(), out / "final.ckpt")
    restore_snapshot(model, result.best)
    save_checkpoint(model.parameters(), out / "best.ckpt")
    (out / "best.json").write_text(
        json.dumps({"epoch": result.best.epoch, "val_loss": result.best.val_loss}) + "\n", "utf-8"
    )
    _write_run_info(out, "train", cfg, {
        "manifest": manifest_path, "triplets": tri_path, "val_triplets": val_path,
    })
    click.echo(
        f"{len(result.history)} epochs, best val loss {result.best.val_loss!r} "
        f"at epoch {result.best.epoch} -> {out}"
    )


def _load_eval_parts(cfg: RunConfig):
    support_path = _need(cfg, "support_manifest")
    support_m = load_manifest(support_path)
    model = build_model(cfg, cfg.seed)
    if cfg.checkpoint:
        load_into(model.parameters(), _need(cfg, "checkpoint"))
    images = _images_if_needed(model, cfg, [support_m])
    support = build_support_set(model, support_m, images=images)
    return model, support_m, support, support_path


@main.command("evaluate")
@_common
@_guard
def cmd_evaluate(config_path, seed, out_override) -> None:
    """Few-shot classify the test manifest against the support manifest.

    Writes predictions.csv, metrics.json, roc_curves.csv, pr_curves.csv.
    """
    cfg = _resolve_config(config_path, seed, out_override)
    model, support_m, support, support_path = _load_eval_parts(cfg)
    test_path = _need(cfg, "test_manifest")
    out = _out_dir(cfg)
    test_m = load_manifest(test_path, classes=list(support_m.classes))
    images = _images_if_needed(model, cfg, [test_m])
    evals, report = batch_evaluate(model, test_m, support, rule=cfg.rule, images=images)
    write_predictions(evals, support.classes, out / "predictions.csv")
    render_report(report, out)
    inputs = {"support_manifest": support_path, "test_manifest": test_path}
    if cfg.checkpoint:
        inputs["checkpoint"] = Path(cfg.checkpoint)
    _write_run_info(out, "evaluate", cfg, inputs)
    click.echo(
        f"accuracy {report.accuracy!r} on {len(evals)} samples "
        f"({cfg.rule} rule) -> {out}"
    )


@main.command("predict")
@click.option("--input", "query", required=True, metavar="PATH_OR_ID",
              help="Image file for pixel models, sample id for embedding models.")
@_common
@_guard
def cmd_predict(query, config_path, seed, out_override) -> None:
    """Classify one sample; prints the prediction CSV row on stdout."""
    cfg = _resolve_config(config_path, seed, out_override)
    model, _, support, support_path = _load_eval_parts(cfg)
    if input_kind(model) == "image":
        x = load_grayscale(query)
    else:
        x = query
    pred = classify(model, x, support, rule=cfg.rule)
    names = support.classes
    header = ["sample", "pred_label", "similarity", "nearest_support_id"]
    header += [f"score_{c}" for c in names]
    row = [query, names[pred.label], repr(pred.similarity), pred.nearest_support_id]
    row += [repr(s) for s in pred.scores]
    click.echo(",".join(header))
    click.echo(",".join(str(v) for v in row))
    if out_override is not None:
        out = _out_dir(cfg)
        (out / "prediction.csv").write_text(
            ",".join(header) + "\n" + ",".join(str(v) for v in row) + "\n", "utf-8"
        )
        _write_run_info(out, "predict", cfg, {"support_manifest": support_path})


@main.command("crossval")
@_common
@_guard
def cmd_crossval(config_path, seed, out_override) -> None:
    """k-fold cross-validation; writes folds.csv and summary.json."""
    cfg = _resolve_config(config_path, seed, out_override)
    manifest_path = _need(cfg, "manifest")
    out = _out_dir(cfg)
    m = load_manifest(manifest_path)
    probe = build_model(cfg, cfg.seed)
    images = _images_if_needed(probe, cfg, [m])
    result = cross_validate(
        m,
        cfg.k_folds,
        _train_cfg(cfg),
        model_factory=lambda s: build_model(cfg, s),
        n_train_triplets=cfg.n_triplets,
        n_val_triplets=cfg.n_val_triplets,
        images=images,
        rule=cfg.rule,
        patient_aware=cfg.patient_aware,
        same_patient_positive=cfg.same_patient_positive,
    )
    with open(out / "folds.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "accuracy", "macro_f1"])
        for j, fold in enumerate(result.folds):
            writer.writerow([j, repr(fold.report.accuracy), repr(fold.report.averages.macro.f1)])
    summary = {
        "k": cfg.k_folds,
        "seed": cfg.seed,
        "accuracy_mean": result.accuracy_mean,
        "accuracy_std": result.accuracy_std,
        "macro_f1_mean": result.macro_f1_mean,
        "macro_f1_std": result.macro_f1_std,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8")
    _write_run_info(out, "crossval", cfg, {"manifest": manifest_path})
    click.echo(
        f"{cfg.k_folds} folds: accuracy {result.accuracy_mean!r} "
        f"+/- {result.accuracy_std!r} -> {out}"
    )


if __name__ == "__main__":
    main()
