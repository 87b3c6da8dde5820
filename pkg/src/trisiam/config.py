"""Run configuration: one file pins an entire experiment.

A RunConfig names the inputs (manifest CSVs, image root, embedding files),
the model (branch declarations), and the knobs (preprocessing, training,
loss) plus a single seed. Files may be JSON or TOML; unknown keys and wrong
types are rejected with the offending field named, so a typo fails loudly
instead of silently running defaults.

Every piece of randomness in a run is derived from RunConfig.seed via
``derive_seed(seed, label)`` with a fixed label per purpose ("model",
"train", "split", "triplets", ...), so two runs of the same config file are
bit-identical and a different seed reshuffles everything coherently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .embfile import as_table, read_embfile
from .ensemble import (
    EXTERNAL_KIND,
    TOY_KIND,
    EnsembleModel,
    build_ensemble,
    build_external_branch,
    build_toy_encoder,
)
from .fewshot import RULES
from .imgproc import PreprocessConfig
from .losses import LossConfig
from .rng import derive_seed
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BranchSpec:
    """One ensemble branch: a trainable toy CNN or a precomputed table."""

    kind: str = TOY_KIND
    name: str = "toy"
    embeddings: str = ""  # EMB1 file, external branches only
    backbone_frozen: bool = False  # toy branches only

    def validate(self) -> None:
        if self.kind not in (TOY_KIND, EXTERNAL_KIND):
            raise ConfigError(
                f"branch {self.name!r}: kind must be {TOY_KIND!r} or "
                f"{EXTERNAL_KIND!r}, got {self.kind!r}"
            )
        if not self.name:
            raise ConfigError("branch name must be non-empty")
        if self.kind == EXTERNAL_KIND and not self.embeddings:
            raise ConfigError(f"branch {self.name!r}: external branches need an embeddings file")
        if self.kind == TOY_KIND and self.embeddings:
            raise ConfigError(f"branch {self.name!r}: toy branches take no embeddings file")


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    image_root: str = ""
    support_manifest: str = ""
    test_manifest: str = ""
    triplets_file: str = ""
    val_triplets_file: str = ""
    checkpoint: str = ""
    out_dir: str = "runs/out"
    rule: str = "nearest"
    val_fraction: float = 0.2
    n_triplets: int = 600
    n_val_triplets: int = 60
    k_folds: int = 5
    patient_aware: bool = False
    same_patient_positive: bool = False
    seed: int = 0
    branches: tuple[BranchSpec, ...] = (BranchSpec(),)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not self.branches:
            raise ConfigError("at least one branch is required")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ConfigError(f"branch names must be unique, got {names}")
        for b in self.branches:
            b.validate()
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.n_triplets < 1 or self.n_val_triplets < 1:
            raise ConfigError("n_triplets and n_val_triplets must be >= 1")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        try:
            self.preprocess.validate()
        except ValueError as exc:
            raise ConfigError(f"preprocess: {exc}") from exc
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc


def _take(data: dict, where: str, allowed: tuple[str, ...]) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _scalar(data: dict, key: str, kind: type, default, where: str):
    if key not in data:
        return default
    v = data[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or (kind is not bool and isinstance(v, bool)):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {type(v).__name__}")
    return v


def _sub_config(cls, data: dict, where: str):
    """Build a flat dataclass (all scalar fields) from a dict."""
    spec = {f.name: f for f in dataclasses.fields(cls)}
    _take(data, where, tuple(spec))
    kwargs = {}
    for name, f in spec.items():
        if name == "focal_alpha":  # the one non-scalar loss field
            if name in data:
                v = data[name]
                if v is not None:
                    if not isinstance(v, list) or not all(
                        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
                    ):
                        raise ConfigError(f"{where}.{name}: expected a list of numbers or null")
                    v = tuple(float(x) for x in v)
                kwargs[name] = v
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[name] = _scalar(data, name, type(default), default, where)
    return cls(**kwargs)


def _branch_from_dict(data: dict, where: str) -> BranchSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table/object")
    _take(data, where, ("kind", "name", "embeddings", "backbone_frozen"))
    return BranchSpec(
        kind=_scalar(data, "kind", str, TOY_KIND, where),
        name=_scalar(data, "name", str, "toy", where),
        embeddings=_scalar(data, "embeddings", str, "", where),
        backbone_frozen=_scalar(data, "backbone_frozen", bool, False, where),
    )


_RUN_SCALARS = (
    ("manifest", str),
    ("image_root", str),
    ("support_manifest", str),
    ("test_manifest", str),
    ("triplets_file", str),
    ("val_triplets_file", str),
    ("checkpoint", str),
    ("out_dir", str),
    ("rule", str),
    ("val_fraction", float),
    ("n_triplets", int),
    ("n_val_triplets", int),
    ("k_folds", int),
    ("patient_aware", bool),
    ("same_patient_positive", bool),
    ("seed", int),
)


def run_config_from_dict(data: dict, where: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table/object at top level")
    allowed = tuple(name for name, _ in _RUN_SCALARS) + ("branches", "preprocess", "train", "loss")
    _take(data, where, allowed)
    defaults = RunConfig()
    kwargs = {
        name: _scalar(data, name, kind, getattr(defaults, name), where)
        for name, kind in _RUN_SCALARS
    }

    if "branches" in data:
        if not isinstance(data["branches"], list):
            raise ConfigError(f"{where}.branches: expected a list of branch tables")
        kwargs["branches"] = tuple(
            _branch_from_dict(b, f"{where}.branches[{i}]") for i, b in enumerate(data["branches"])
        )
    if "preprocess" in data:
        if not isinstance(data["preprocess"], dict):
            raise ConfigError(f"{where}.preprocess: expected a table/object")
        kwargs["preprocess"] = _sub_config(
            PreprocessConfig, data["preprocess"], f"{where}.preprocess"
        )

    if not isinstance(data.get("train", {}), dict):
        raise ConfigError(f"{where}.train: expected a table/object")
    train_data = dict(data.get("train", {}))
    loss_data = data.get("loss", train_data.pop("loss", {}))
    if not isinstance(loss_data, dict):
        raise ConfigError(f"{where}.loss: expected a table/object")
    loss = _sub_config(LossConfig, loss_data, f"{where}.loss")
    train = _sub_config(TrainConfig, train_data, f"{where}.train")
    kwargs["train"] = dataclasses.replace(train, loss=loss)

    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON (.json) or TOML (.toml) run configuration."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    elif path.suffix == ".toml":
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    else:
        raise ConfigError(f"{path}: unsupported config format (use .json or .toml)")
    return run_config_from_dict(data, where=str(path))


def config_to_dict(cfg: RunConfig) -> dict:
    data = dataclasses.asdict(cfg)
    data["branches"] = [dict(b) for b in data["branches"]]
    alpha = data["train"]["loss"]["focal_alpha"]
    if alpha is not None:
        data["train"]["loss"]["focal_alpha"] = list(alpha)
    return data


def save_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", "utf-8")


def config_digest(cfg: RunConfig) -> str:
    """sha256 over the canonical JSON form; stable across load formats."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_model(cfg: RunConfig, seed: int) -> EnsembleModel:
    """Assemble the declared ensemble. Branch inits and the fusion layer get
    labeled sub-seeds of ``seed``; external tables are read from EMB1 files."""
    cfg.validate()
    branches = []
    for spec in cfg.branches:
        bseed = derive_seed(seed, f"model.branch.{spec.name}")
        if spec.kind == TOY_KIND:
            branches.append(
                build_toy_encoder(bseed, name=spec.name, backbone_frozen=spec.backbone_frozen)
            )
        else:
            ids, vectors = read_embfile(spec.embeddings)
            branches.append(
                build_external_branch(
                    vectors.shape[1], as_table(ids, vectors), name=spec.name, seed=bseed
                )
            )
    return build_ensemble(branches, seed=derive_seed(seed, "model.fusion"))
