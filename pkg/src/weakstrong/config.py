"""Experiment configuration: one YAML file drives synth, train and benchmark.

Every section maps onto a dataclass that validates itself; unknown keys and
type mismatches are reported as ``ConfigError`` naming the offending field.
See ``configs/default.yaml`` for a fully spelled-out example.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .evalmetrics import CVSettings
from .model import ModelConfig
from .schemes import EarlyStopping, SchemeConfig
from .shift import ShiftConfig
from .synthdata import GenConfig

OUTPUT_DIR_ENV = "WEAKSTRONG_OUTPUT_DIR"
CONFIG_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Model section; the input width always comes from ``gen.input_dim``."""

    hidden_dims: tuple[int, ...] = (32, 16)
    domain_head: bool = False

    def build(self, input_dim: int, shift: ShiftConfig | None = None) -> ModelConfig:
        needs_head = self.domain_head or (shift is not None and shift.mode == "adversarial")
        return ModelConfig(input_dim=input_dim, hidden_dims=tuple(self.hidden_dims), domain_head=needs_head)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    patience: int = 5
    monitor: str = "val_loss"

    def __post_init__(self):
        self.stopping()

    def stopping(self) -> EarlyStopping:
        return EarlyStopping(max_epochs=self.epochs, patience=self.patience, monitor=self.monitor)


@dataclass
class ExperimentConfig:
    seed: int
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    cv: CVSettings = field(default_factory=CVSettings)
    output_dir: str = "runs/default"
    dataset: str | None = None

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")

    def model_config(self, shift: ShiftConfig | None = None) -> ModelConfig:
        return self.model.build(self.gen.input_dim, shift or self.shift)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "gen": self.gen.to_dict(),
            "model": {"hidden_dims": list(self.model.hidden_dims), "domain_head": self.model.domain_head},
            "scheme": asdict(self.scheme),
            "shift": asdict(self.shift),
            "train": asdict(self.train),
            "cv": asdict(self.cv),
        }

    def hash(self) -> str:
        """Digest of the settings that affect results.

        ``output_dir`` and the dataset path are left out; the manifest records
        a content hash of the dataset file instead.
        """
        payload = self.to_dict()
        payload.pop("output_dir")
        payload.pop("dataset")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_scalar_types(cls, name: str, raw: dict) -> None:
    """Reject values whose type disagrees with a scalar field default."""
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in raw.items():
        default = defaults.get(key)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            # a few string fields (kernel_bandwidth) also accept numbers
            ok = isinstance(value, (str, int, float)) and not isinstance(value, bool)
        else:
            continue
        if not ok:
            raise ConfigError(f"expected {type(default).__name__}, got {value!r}", f"{name}.{key}")


def _section(cls, name: str, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", name)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", f"{name}.{key}")
    _check_scalar_types(cls, name, raw)
    kwargs = dict(raw)
    if "hidden_dims" in kwargs:
        if not isinstance(kwargs["hidden_dims"], (list, tuple)):
            raise ConfigError("expected a list of integers", f"{name}.hidden_dims")
        kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "config")
    top = {"version", "seed", "output_dir", "dataset", "gen", "model", "scheme", "shift", "train", "cv"}
    for key in raw:
        if key not in top:
            raise ConfigError("unknown key", str(key))
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}", "version")
    if "seed" not in raw:
        raise ConfigError("is required (there is no wall-clock default)", "seed")
    gen_raw = raw.get("gen") or {}
    if not isinstance(gen_raw, dict):
        raise ConfigError("expected a mapping", "gen")
    # the dataset seed follows the experiment seed unless pinned explicitly
    gen_raw = {"seed": raw["seed"], **gen_raw}
    _check_scalar_types(GenConfig, "gen", {k: v for k, v in gen_raw.items() if k in {f.name for f in fields(GenConfig)}})
    try:
        gen = GenConfig.from_dict(gen_raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "gen") from None
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("expected a path string", "output_dir")
    dataset = raw.get("dataset")
    if dataset is not None and not isinstance(dataset, str):
        raise ConfigError("expected a path string or null", "dataset")
    return ExperimentConfig(
        seed=raw["seed"],
        gen=gen,
        model=_section(ModelSpec, "model", raw.get("model")),
        scheme=_section(SchemeConfig, "scheme", raw.get("scheme")),
        shift=_section(ShiftConfig, "shift", raw.get("shift")),
        train=_section(TrainSpec, "train", raw.get("train")),
        cv=_section(CVSettings, "cv", raw.get("cv")),
        output_dir=output_dir,
        dataset=dataset,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", "config") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}", "config") from None
    cfg = config_from_dict(raw)
    if cfg.dataset is not None and not Path(cfg.dataset).is_absolute():
        # relative dataset paths are resolved against the config file
        cfg.dataset = str((path.parent / cfg.dataset).resolve())
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
