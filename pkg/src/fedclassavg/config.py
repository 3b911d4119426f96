"""Flat ``key = value`` experiment files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Every file must declare ``version = 1``.  Unknown or repeated keys and
out-of-range values are rejected with the offending line number.

Example::

    version = 1
    dataset = synthetic
    K = 20
    T = 100
    lr = 0.05
    archs = mlp_small, mlp_wide, mlp_deep, linear
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasets import (
    AugmentationConfig,
    LabeledDataset,
    PartitionPlan,
    generate_synthetic,
    load_idx,
    partition_dirichlet,
    partition_iid,
    partition_skewed,
)
from .federation import AGGREGATE_MODES, FederationConfig, derive_seed
from .losses import LossConfig
from .metrics import CommModel
from .models import ARCH_KINDS, ArchSpec

SCHEMA_VERSION = 1
DATASETS = ("synthetic", "idx")
PARTITIONS = ("skewed", "dirichlet", "iid")

# seed-stream tags for data generation, disjoint from the federation's own
_DATA, _PARTITION = 100, 101


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    # data
    dataset: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 100
    class_separation: float = 1.5
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    partition: str = "skewed"
    classes_per_client: int = 2
    alpha: float = 0.5
    # protocol
    K: int = 20
    T: int = 100
    E: int = 1
    sampling_rate: float = 1.0
    lr: float = 0.05
    batch_size: int = 64
    aggregate: bool = True
    aggregate_mode: str = "classifier_only"
    weigh_over_all_clients: bool = False
    # objective
    rho: float = 0.1
    temperature: float = 0.07
    enable_CL: bool = True
    enable_PR: bool = True
    squared_proximal: bool = False
    # models
    archs: tuple[str, ...] = ("mlp_small", "mlp_wide", "mlp_deep", "linear")
    feature_dim: int = 64
    # augmentation
    noise_sigma: float = 0.1
    flip_prob: float = 0.0
    crop_pad: int = 0
    scale_jitter: float = 0.0
    # accounting and outputs
    bytes_per_parameter: int = 4
    header_bytes: int = 0
    dump_features: bool = False
    seed: int = 0
    # where relative IDX paths are resolved; not a key
    base_dir: str = field(default=".", compare=False)


KEYS = tuple(f.name for f in fields(ExperimentConfig) if f.name != "base_dir")
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

_CHECKS = {
    "version": (lambda v: v == SCHEMA_VERSION, f"only schema version {SCHEMA_VERSION} is supported"),
    "dataset": (lambda v: v in DATASETS, f"must be one of {', '.join(DATASETS)}"),
    "num_classes": (lambda v: v >= 2, "must be >= 2"),
    "input_dim": (lambda v: v >= 2, "must be >= 2"),
    "samples_per_class": (lambda v: v >= 2, "must be >= 2"),
    "class_separation": (lambda v: v >= 0, "must be >= 0"),
    "partition": (lambda v: v in PARTITIONS, f"must be one of {', '.join(PARTITIONS)}"),
    "classes_per_client": (lambda v: v >= 1, "must be >= 1"),
    "alpha": (lambda v: v > 0, "must be > 0"),
    "K": (lambda v: v >= 1, "must be >= 1"),
    "T": (lambda v: v >= 1, "must be >= 1"),
    "E": (lambda v: v >= 1, "must be >= 1"),
    "sampling_rate": (lambda v: 0 < v <= 1, "must be in (0, 1]"),
    "lr": (lambda v: v >= 0, "must be >= 0"),
    "batch_size": (lambda v: v >= 1, "must be >= 1"),
    "aggregate_mode": (lambda v: v in AGGREGATE_MODES, f"must be one of {', '.join(AGGREGATE_MODES)}"),
    "rho": (lambda v: v >= 0, "must be >= 0"),
    "temperature": (lambda v: v > 0, "must be > 0"),
    "archs": (lambda v: len(v) > 0 and all(a in ARCH_KINDS for a in v), f"entries must be from {', '.join(ARCH_KINDS)}"),
    "feature_dim": (lambda v: v >= 1, "must be >= 1"),
    "noise_sigma": (lambda v: v >= 0, "must be >= 0"),
    "flip_prob": (lambda v: 0 <= v <= 1, "must be in [0, 1]"),
    "crop_pad": (lambda v: v >= 0, "must be >= 0"),
    "scale_jitter": (lambda v: v >= 0, "must be >= 0"),
    "bytes_per_parameter": (lambda v: v >= 1, "must be >= 1"),
    "header_bytes": (lambda v: v >= 0, "must be >= 0"),
    "seed": (lambda v: 0 <= v < 2**64, "must be in [0, 2^64)"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected true or false, got {raw!r}")
    if kind == "int":
        return int(raw, 0)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return v
    if kind.startswith("tuple"):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>", base_dir: str | Path = ".") -> ExperimentConfig:
    values: dict = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", source, lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", source, lineno)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", source, lineno)
        try:
            value = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", source, lineno) from None
        check = _CHECKS.get(key)
        if check and not check[0](value):
            raise ConfigError(f"{key} {check[1]}, got {raw!r}", source, lineno)
        values[key] = value
        lines[key] = lineno
    if "version" not in values:
        raise ConfigError("missing required key 'version'", source)
    cfg = ExperimentConfig(**values, base_dir=str(base_dir))
    try:
        validate(cfg)
    except ConfigError as exc:
        # re-raise with the line of the key the message starts with, when known
        key = str(exc).split(": ", 1)[-1].split(" ", 1)[0]
        raise ConfigError(str(exc).split(": ", 1)[-1], source, lines.get(key)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", str(path)) from None
    except UnicodeDecodeError:
        raise ConfigError("config is not UTF-8 text", str(path)) from None
    return parse_config(text, str(path), path.parent)


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks that a single line cannot express."""
    if cfg.dataset == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"{key} is required when dataset = idx")
    if cfg.partition == "skewed" and cfg.classes_per_client > cfg.num_classes:
        raise ConfigError(
            f"classes_per_client {cfg.classes_per_client} exceeds num_classes {cfg.num_classes}"
        )
    if cfg.aggregate_mode == "full_weights" and len(set(cfg.archs)) != 1:
        raise ConfigError("archs must name a single architecture when aggregate_mode = full_weights")
    for key, (ok, why) in _CHECKS.items():
        if not ok(getattr(cfg, key)):
            raise ConfigError(f"{key} {why}, got {_format(getattr(cfg, key))!r}")


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical form: every key, in declaration order."""
    return "".join(f"{k} = {_format(getattr(cfg, k))}\n" for k in KEYS)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    out = replace(cfg, **changes)
    validate(out)
    return out


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    return FederationConfig(
        K=cfg.K,
        T=cfg.T,
        E=cfg.E,
        sampling_rate=cfg.sampling_rate,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        loss=LossConfig(
            rho=cfg.rho,
            temperature=cfg.temperature,
            enable_CL=cfg.enable_CL,
            enable_PR=cfg.enable_PR,
            squared_proximal=cfg.squared_proximal,
        ),
        aggregate_mode=cfg.aggregate_mode,
        aggregate=cfg.aggregate,
        arch_assignment=tuple(ArchSpec(a, feature_dim=cfg.feature_dim) for a in cfg.archs),
        aug=AugmentationConfig(
            noise_sigma=cfg.noise_sigma,
            flip_prob=cfg.flip_prob,
            crop_pad=cfg.crop_pad,
            scale_jitter=cfg.scale_jitter,
            seed=cfg.seed,
        ),
        seed=cfg.seed,
        weigh_over_all_clients=cfg.weigh_over_all_clients,
        comm=CommModel(cfg.bytes_per_parameter, cfg.header_bytes),
    )


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.dataset == "synthetic":
        return generate_synthetic(
            cfg.num_classes,
            cfg.input_dim,
            cfg.samples_per_class,
            cfg.class_separation,
            derive_seed(cfg.seed, _DATA),
        )
    base = Path(cfg.base_dir)
    p = lambda s: base / s  # noqa: E731
    train = load_idx(p(cfg.train_images), p(cfg.train_labels), cfg.num_classes, "train")
    test = load_idx(p(cfg.test_images), p(cfg.test_labels), cfg.num_classes, "test")
    return train, test


def make_partition(cfg: ExperimentConfig, train: LabeledDataset) -> PartitionPlan:
    seed = derive_seed(cfg.seed, _PARTITION)
    if cfg.partition == "skewed":
        return partition_skewed(train, cfg.K, cfg.classes_per_client, seed)
    if cfg.partition == "dirichlet":
        return partition_dirichlet(train, cfg.K, cfg.alpha, seed)
    return partition_iid(train, cfg.K, seed)
