"""Experiment configuration: flat key=value text with dotted keys.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
rejected. Values are validated by constructing the target dataclasses, so a
config that parses runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig, Dataset, SplitSpec, generate_synthetic_dataset, \
    load_dataset, scaled_counts
from .errors import ConfigError
from .losses import FocalParams, LossWeights
from .networks import DNetConfig, FNetConfig, RNetConfig, default_reshape_side
from .training import MODES, TrainConfig


def _parse_bool(text, key):
    t = text.lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


_DEFAULTS = {
    "data.source": "synthetic",
    "data.path": "",
    "data.labels": "labels.csv",
    "data.classes": "3",
    "data.class_counts": "",
    "data.base_counts": "",
    "data.scale": "1.0",
    "data.generate_size": "32",
    "data.test_per_class": "100",
    "data.validation_fraction": "0.2",
    "image_size": "224",
    "fnet.depth": "18",
    "fnet.feature_width": "128",
    "fnet.in_channels": "1",
    "rnet.reshape_side": "auto",
    "rnet.reshape_channels": "128",
    "dnet.downsamples": "3",
    "dnet.base_channels": "64",
    "train.mode": "+rnet+dnet",
    "train.batch_size": "8",
    "train.epochs": "200",
    "train.learning_rate": "0.001",
    "train.beta1": "0.5",
    "train.beta2": "0.999",
    "train.adam_eps": "1e-8",
    "train.dataset_fraction": "1.0",
    "train.hem_fraction": "0.25",
    "loss.lambda1": "0.2",
    "loss.lambda2": "1.0",
    "loss.lambda": "0.5",
    "loss.eps1": "1e-6",
    "loss.eps2": "1e-6",
    "focal.gamma": "1.5",
    "focal.alpha": "0.25",
    "augment.rotation_range": "10",
    "augment.flip_probability": "0.5",
    "augment.rotation_enabled": "true",
    "compare.modes": "baseline,+rnet+dnet",
    "compare.baseline": "baseline",
    "repeats": "3",
    "seed": "0",
    "deterministic": "true",
    "figures": "true",
    "output": "runs/experiment",
}


def parse_config_text(text) -> dict[str, str]:
    values = dict(_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


@dataclass
class ExperimentConfig:
    """Validated experiment description; factory methods build the pieces."""

    raw: dict[str, str]
    source: str = ""
    data_path: str = ""
    labels_file: str = ""
    class_count: int = 3
    class_counts: list[int] = field(default_factory=list)
    generate_size: int = 32
    test_per_class: int = 100
    validation_fraction: float = 0.2
    image_size: int = 224
    depth: int = 18
    feature_width: int = 128
    in_channels: int = 1
    reshape_side: int | None = None
    reshape_channels: int = 128
    downsamples: int = 3
    dnet_base_channels: int = 64
    mode: str = "+rnet+dnet"
    repeats: int = 3
    seed: int = 0
    deterministic: bool = True
    figures: bool = True
    output: str = "runs/experiment"
    compare_modes: list[str] = field(default_factory=list)
    compare_baseline: str = "baseline"
    train_fields: dict = field(default_factory=dict)
    augment_fields: dict = field(default_factory=dict)

    # -- factories -----------------------------------------------------------

    def load_full_dataset(self) -> Dataset:
        if self.source == "disk":
            return load_dataset(self.data_path, self.labels_file)
        return generate_synthetic_dataset(self.class_count, self.class_counts,
                                          self.generate_size, self.seed)

    def split_spec(self, seed=None) -> SplitSpec:
        return SplitSpec(self.test_per_class, self.validation_fraction,
                         self.seed if seed is None else seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(target_size=self.image_size, **self.augment_fields)

    def train_config(self, mode=None, seed=None) -> TrainConfig:
        return TrainConfig(mode=mode or self.mode,
                           seed=self.seed if seed is None else seed,
                           deterministic=self.deterministic,
                           **self.train_fields)

    def network_configs(self, mode=None):
        """(FNetConfig, RNetConfig | None, DNetConfig | None) for a mode."""
        mode = mode or self.mode
        fcfg = FNetConfig(self.depth, self.image_size, self.feature_width,
                          self.in_channels)
        rcfg = dcfg = None
        if mode in ("+rnet", "+rnet+dnet"):
            side = self.reshape_side or default_reshape_side(self.image_size)
            rcfg = RNetConfig(feature_width=self.feature_width,
                              reshape_channels=self.reshape_channels,
                              reshape_side=side, image_size=self.image_size)
            rcfg.validate()
        if mode == "+rnet+dnet":
            dcfg = DNetConfig(self.image_size, self.downsamples,
                              self.dnet_base_channels, self.class_count)
            dcfg.patch_side  # validates geometry now, not at build time
        return fcfg, rcfg, dcfg

    def validate(self):
        """Cross-field checks beyond what the dataclass factories enforce."""
        for mode in set([self.mode] + self.compare_modes):
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
            self.network_configs(mode)
        self.split_spec()
        self.augment_config()
        self.train_config()
        if self.source == "synthetic":
            if len(self.class_counts) != self.class_count:
                raise ConfigError("data.class_counts must list one count per class")
        elif self.source == "disk":
            if not self.data_path:
                raise ConfigError("data.path is required for data.source = disk")
        else:
            raise ConfigError(f"data.source must be synthetic or disk, got {self.source!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        return self


def _ints(text, key):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers") from exc


def build_config(values: dict[str, str]) -> ExperimentConfig:
    def i(key):
        try:
            return int(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {values[key]!r}") from exc

    def f(key):
        try:
            return float(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {values[key]!r}") from exc

    try:
        weights = LossWeights(f("loss.lambda1"), f("loss.lambda2"), f("loss.lambda"),
                              f("loss.eps1"), f("loss.eps2"))
        focal = FocalParams(f("focal.gamma"), f("focal.alpha"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    class_count = i("data.classes")
    counts = _ints(values["data.class_counts"], "data.class_counts")
    if not counts and values["data.base_counts"]:
        base = _ints(values["data.base_counts"], "data.base_counts")
        counts = scaled_counts(base, f("data.scale"))
    if values["data.source"] == "synthetic" and len(counts) >= 2:
        class_count = len(counts)

    side_text = values["rnet.reshape_side"]
    reshape_side = None if side_text == "auto" else int(side_text)

    cfg = ExperimentConfig(
        raw=dict(values),
        source=values["data.source"],
        data_path=values["data.path"],
        labels_file=values["data.labels"],
        class_count=class_count,
        class_counts=counts,
        generate_size=i("data.generate_size"),
        test_per_class=i("data.test_per_class"),
        validation_fraction=f("data.validation_fraction"),
        image_size=i("image_size"),
        depth=i("fnet.depth"),
        feature_width=i("fnet.feature_width"),
        in_channels=i("fnet.in_channels"),
        reshape_side=reshape_side,
        reshape_channels=i("rnet.reshape_channels"),
        downsamples=i("dnet.downsamples"),
        dnet_base_channels=i("dnet.base_channels"),
        mode=values["train.mode"],
        repeats=i("repeats"),
        seed=i("seed"),
        deterministic=_parse_bool(values["deterministic"], "deterministic"),
        figures=_parse_bool(values["figures"], "figures"),
        output=values["output"],
        compare_modes=[m.strip() for m in values["compare.modes"].split(",") if m.strip()],
        compare_baseline=values["compare.baseline"],
        train_fields=dict(
            batch_size=i("train.batch_size"),
            epochs=i("train.epochs"),
            learning_rate=f("train.learning_rate"),
            beta1=f("train.beta1"),
            beta2=f("train.beta2"),
            adam_eps=f("train.adam_eps"),
            dataset_fraction=f("train.dataset_fraction"),
            hem_fraction=f("train.hem_fraction"),
            weights=weights,
            focal=focal,
        ),
        augment_fields=dict(
            rotation_range=f("augment.rotation_range"),
            flip_probability=f("augment.flip_probability"),
            rotation_enabled=_parse_bool(values["augment.rotation_enabled"],
                                         "augment.rotation_enabled"),
        ),
    )
    try:
        return cfg.validate()
    except ConfigError:
        raise
    except Exception as exc:  # dataclass validators raise their own types
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text)
    for key, val in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = val
    return build_config(values)
