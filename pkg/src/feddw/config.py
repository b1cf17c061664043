"""Run configuration: JSON config files, experiment presets, flag overrides,
and dataset materialization.

Precedence, lowest to highest: built-in defaults, preset overrides, config
file values, command-line flag overrides. Unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import data
from .engine import FedAvg, FedDW, FedProx, LocalOnly, RegularizerConfig, Strategy
from .errors import ConfigError
from .nn import ModelSpec
from .numerics import Rng

SCHEMA_VERSION = 1
SWEEP_MU_VALUES = (0.01, 0.1, 1.0, 10.0, 100.0)

STRATEGY_KINDS = ("fedavg", "fedprox", "feddw", "local")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    # blobs
    classes: int = 5
    per_class: int = 200
    dim: int = 16
    spread: float = 0.25
    test_per_class: int = 50
    # mnist (directory holding the four IDX files, optionally gzipped)
    dir: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None


@dataclass(frozen=True)
class ModelOptions:
    hidden: int = 128
    embed: int = 128
    # None resolves per strategy: bias-free for feddw, biased otherwise
    classifier_bias: bool | None = None


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    strategy_kind: str = "fedavg"
    mu: float = 0.1
    prox_mu: float = 0.01
    reg_mode: str = "exact"
    linearization_refresh: int = 50
    clients: int = 10
    rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 128
    participation: float = 1.0
    beta: float = 0.5
    learning_rate: float = 0.001
    seed: int = 0
    workers: int = 1
    dataset: DatasetSpec = DatasetSpec()
    model: ModelOptions = ModelOptions()

    @property
    def strategy(self) -> Strategy:
        if self.strategy_kind == "fedavg":
            return FedAvg()
        if self.strategy_kind == "fedprox":
            return FedProx(prox_mu=self.prox_mu)
        if self.strategy_kind == "feddw":
            return FedDW(reg=RegularizerConfig(
                mu=self.mu, mode=self.reg_mode,
                linearization_refresh=self.linearization_refresh,
            ))
        if self.strategy_kind == "local":
            return LocalOnly()
        raise ConfigError(f"unknown strategy {self.strategy_kind!r}")

    def classifier_bias(self) -> bool:
        if self.model.classifier_bias is not None:
            return self.model.classifier_bias
        return self.strategy_kind != "feddw"

    def model_spec(self, input_dim: int, class_count: int) -> ModelSpec:
        return ModelSpec(
            input_dim=input_dim,
            class_count=class_count,
            hidden=self.model.hidden,
            embed=self.model.embed,
            classifier_bias=self.classifier_bias(),
        )


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    overrides: dict


PRESETS = {
    p.name: p
    for p in (
        ExperimentPreset("practical", {"beta": 0.5, "participation": 1.0}),
        ExperimentPreset("pathological", {"beta": 0.1, "participation": 0.5}),
        ExperimentPreset("iid", {"beta": 1e6, "participation": 1.0}),
        ExperimentPreset("norm-study", {"participation": 1.0,
                                        "model": {"classifier_bias": False}}),
        ExperimentPreset("heatmap-study", {"beta": 0.1, "participation": 0.5,
                                           "strategy": "feddw", "mu": 10.0}),
        ExperimentPreset("sweep-mu", {"strategy": "feddw"}),
    )
}

# key -> (expected python types, human-readable type name)
_TOP_KEYS = {
    "name": (str, "string"),
    "strategy": (str, "string"),
    "mu": ((int, float), "number"),
    "prox_mu": ((int, float), "number"),
    "reg_mode": (str, "string"),
    "linearization_refresh": (int, "integer"),
    "clients": (int, "integer"),
    "rounds": (int, "integer"),
    "local_epochs": (int, "integer"),
    "batch_size": (int, "integer"),
    "participation": ((int, float), "number"),
    "beta": ((int, float), "number"),
    "learning_rate": ((int, float), "number"),
    "seed": (int, "integer"),
    "workers": (int, "integer"),
    "dataset": (dict, "object"),
    "model": (dict, "object"),
}

_DATASET_KEYS = {
    "kind": (str, "string"),
    "classes": (int, "integer"),
    "per_class": (int, "integer"),
    "dim": (int, "integer"),
    "spread": ((int, float), "number"),
    "test_per_class": (int, "integer"),
    "dir": (str, "string"),
    "train_subset": (int, "integer"),
    "test_subset": (int, "integer"),
}

_MODEL_KEYS = {
    "hidden": (int, "integer"),
    "embed": (int, "integer"),
    "classifier_bias": (bool, "boolean"),
}


def _check_keys(section: str, values: dict, schema: dict) -> None:
    for key, value in values.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {section}{key!r}")
        expected, name = schema[key]
        if value is None and key in ("dir", "train_subset", "test_subset", "classifier_bias"):
            continue
        if isinstance(value, bool) and expected is not bool:
            raise ConfigError(f"config key {section}{key!r}: expected {name}, got boolean")
        if not isinstance(value, expected):
            raise ConfigError(
                f"config key {section}{key!r}: expected {name}, got {value!r}"
            )


def _merge(base: dict, overlay: dict) -> dict:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validate(config: RunConfig) -> RunConfig:
    c = config
    if c.strategy_kind not in STRATEGY_KINDS:
        raise ConfigError(f"strategy must be one of {STRATEGY_KINDS}, got {c.strategy_kind!r}")
    if c.mu < 0:
        raise ConfigError(f"mu must be >= 0, got {c.mu}")
    if c.prox_mu < 0:
        raise ConfigError(f"prox_mu must be >= 0, got {c.prox_mu}")
    if c.reg_mode not in ("exact", "linearized"):
        raise ConfigError(f"reg_mode must be 'exact' or 'linearized', got {c.reg_mode!r}")
    if c.linearization_refresh < 1:
        raise ConfigError("linearization_refresh must be >= 1")
    if c.clients < 1:
        raise ConfigError(f"clients must be >= 1, got {c.clients}")
    if c.rounds < 0:
        raise ConfigError(f"rounds must be >= 0, got {c.rounds}")
    if c.local_epochs < 1:
        raise ConfigError(f"local_epochs must be >= 1, got {c.local_epochs}")
    if c.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {c.batch_size}")
    if not 0.0 < c.participation <= 1.0:
        raise ConfigError(f"participation must be in (0, 1], got {c.participation}")
    if not c.beta > 0:
        raise ConfigError(f"beta must be positive, got {c.beta}")
    if not c.learning_rate > 0:
        raise ConfigError(f"learning_rate must be positive, got {c.learning_rate}")
    if c.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {c.workers}")
    if c.dataset.kind not in ("blobs", "mnist"):
        raise ConfigError(f"dataset kind must be 'blobs' or 'mnist', got {c.dataset.kind!r}")
    if c.dataset.kind == "mnist" and not c.dataset.dir:
        raise ConfigError("dataset kind 'mnist' requires dataset.dir")
    if c.dataset.kind == "blobs":
        if c.dataset.classes < 2:
            raise ConfigError("dataset.classes must be >= 2")
        if c.dataset.per_class < 1 or c.dataset.test_per_class < 1:
            raise ConfigError("dataset.per_class and dataset.test_per_class must be >= 1")
        if c.dataset.dim < 2:
            raise ConfigError("dataset.dim must be >= 2")
        if c.dataset.spread < 0:
            raise ConfigError("dataset.spread must be >= 0")
    if c.model.hidden < 1 or c.model.embed < 1:
        raise ConfigError("model.hidden and model.embed must be >= 1")
    return c


def _from_dict(values: dict) -> RunConfig:
    _check_keys("", values, _TOP_KEYS)
    dataset_values = values.get("dataset", {})
    model_values = values.get("model", {})
    _check_keys("dataset.", dataset_values, _DATASET_KEYS)
    _check_keys("model.", model_values, _MODEL_KEYS)
    kwargs = {k: v for k, v in values.items() if k not in ("dataset", "model", "strategy")}
    if "strategy" in values:
        kwargs["strategy_kind"] = values["strategy"]
    for key in ("mu", "prox_mu", "participation", "beta", "learning_rate"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    config = RunConfig(
        dataset=DatasetSpec(**dataset_values),
        model=ModelOptions(**model_values),
        **kwargs,
    )
    return _validate(config)


def to_dict(config: RunConfig) -> dict:
    """Full key set, suitable for re-parsing (emit/parse round-trips)."""
    out = {
        "name": config.name,
        "strategy": config.strategy_kind,
        "mu": config.mu,
        "prox_mu": config.prox_mu,
        "reg_mode": config.reg_mode,
        "linearization_refresh": config.linearization_refresh,
        "clients": config.clients,
        "rounds": config.rounds,
        "local_epochs": config.local_epochs,
        "batch_size": config.batch_size,
        "participation": config.participation,
        "beta": config.beta,
        "learning_rate": config.learning_rate,
        "seed": config.seed,
        "workers": config.workers,
        "dataset": {k: v for k, v in dataclasses.asdict(config.dataset).items() if v is not None},
        "model": {k: v for k, v in dataclasses.asdict(config.model).items() if v is not None},
    }
    return out


def parse_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Build a validated RunConfig from defaults, preset, file, and overrides."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = _merge(merged, PRESETS[preset].overrides)
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                file_values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(file_values, dict):
                raise ConfigError(f"{path}: top level must be a JSON object")
        else:
            file_values = {}
        merged = _merge(merged, file_values)
    if overrides:
        merged = _merge(merged, {k: v for k, v in overrides.items() if v is not None})
    return _from_dict(merged)


def config_hash(config: RunConfig) -> str:
    """Stable content hash; seed/workers/name are run labels, not content."""
    payload = to_dict(config)
    for key in ("seed", "workers", "name"):
        payload.pop(key, None)
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return digest[:10]


def _mnist_path(directory: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        candidate = directory / (stem + suffix)
        if candidate.exists():
            return candidate
    raise ConfigError(f"missing MNIST file {stem}[.gz] in {directory}")


def materialize(spec: DatasetSpec, seed: int) -> tuple[data.Dataset, data.Dataset]:
    """Produce (train, test) datasets for a spec, deterministically per seed."""
    if spec.kind == "blobs":
        rng = Rng(seed).child("data")
        train = data.make_blobs(rng.child("train"), spec.classes, spec.per_class,
                                spec.dim, spec.spread)
        test = data.make_blobs(rng.child("test"), spec.classes, spec.test_per_class,
                               spec.dim, spec.spread)
        return train, test
    if spec.kind == "mnist":
        directory = Path(spec.dir)
        train = data.load_mnist(_mnist_path(directory, MNIST_FILES["train_images"]),
                                _mnist_path(directory, MNIST_FILES["train_labels"]))
        test = data.load_mnist(_mnist_path(directory, MNIST_FILES["test_images"]),
                               _mnist_path(directory, MNIST_FILES["test_labels"]))
        if spec.train_subset is not None:
            train = data.Dataset(train.features[: spec.train_subset],
                                 train.labels[: spec.train_subset], train.class_count)
        if spec.test_subset is not None:
            test = data.Dataset(test.features[: spec.test_subset],
                                test.labels[: spec.test_subset], test.class_count)
        return train, test
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")
