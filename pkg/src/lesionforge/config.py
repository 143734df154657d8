"""Run configuration: one key table drives parsing, validation, defaults and ``--help``."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from . import DEFAULT_SEED
from .data import AugmentSpec
from .errors import ConfigError
from .models import RESNET_PRESETS, DAEConfig, ResNetConfig
from .trainer import HybridConfig, TrainConfig

SECTIONS = ("data", "model", "dae", "train", "eval")


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    type: str  # int | float | bool | str | ints
    default: Any
    help: str

    @property
    def dotted(self) -> str:
        return f"{self.section}.{self.name}"


KEYS: tuple[Key, ...] = (
    Key("data", "manifest", "str", "", "dataset manifest (id,file,label); empty = synthetic data"),
    Key("data", "data_root", "str", "", "directory image paths are relative to (default: manifest dir)"),
    Key("data", "n_per_class", "int", 100, "synthetic samples per class"),
    Key("data", "image_size", "int", 0, "square image side; 0 = the model preset's input size"),
    Key("data", "test_fraction", "float", 0.2, "stratified held-out test fraction"),
    Key("data", "val_fraction", "float", 0.1, "validation fraction carved from the training split"),
    Key("data", "balance", "bool", True, "oversample minority classes with augmented copies"),
    Key("data", "hflip_p", "float", 0.5, "augmentation: horizontal flip probability"),
    Key("data", "vflip_p", "float", 0.5, "augmentation: vertical flip probability"),
    Key("data", "rotation_deg", "float", 20.0, "augmentation: max rotation in degrees"),
    Key("data", "translate_frac", "float", 0.1, "augmentation: max translation as a fraction of size"),
    Key("model", "preset", "str", "tiny", "classifier preset: " + ", ".join(RESNET_PRESETS)),
    Key("model", "stage_blocks", "ints", (), "bottleneck blocks per stage; empty = preset"),
    Key("model", "base_width", "int", 0, "stage-1 bottleneck width; 0 = preset"),
    Key("model", "zero_init_residual", "bool", False, "zero the last BN scale of every block"),
    Key("dae", "encoder_channels", "ints", (16, 8), "channels of the stride-2 encoder convolutions"),
    Key("dae", "decoder_channels", "ints", (), "decoder conv channels; empty = mirror the encoder"),
    Key("dae", "kernel_size", "int", 3, "autoencoder convolution kernel size"),
    Key("dae", "epochs", "int", 20, "autoencoder training epochs"),
    Key("dae", "batch_size", "int", 32, "autoencoder minibatch size"),
    Key("dae", "lr", "float", 1e-3, "autoencoder learning rate"),
    Key("dae", "noise_std", "float", 0.0, "gaussian input corruption during autoencoder training"),
    Key("train", "seed", "int", DEFAULT_SEED, "seed for splits, augmentation, init and shuffling"),
    Key("train", "epochs", "int", 100, "classifier training epochs"),
    Key("train", "batch_size", "int", 32, "classifier minibatch size (>= 2)"),
    Key("train", "optimizer", "str", "adam", "adam or sgd_momentum"),
    Key("train", "lr", "float", 1e-3, "classifier learning rate"),
    Key("train", "momentum", "float", 0.9, "sgd_momentum momentum"),
    Key("train", "beta1", "float", 0.9, "adam first-moment decay"),
    Key("train", "beta2", "float", 0.999, "adam second-moment decay"),
    Key("train", "weight_decay", "float", 0.0, "L2 penalty added to every gradient"),
    Key("train", "checkpoint_every", "int", 1, "epochs between rolling checkpoints"),
    Key("train", "early_stop_patience", "int", 0, "stop after this many epochs without a new best; 0 = off"),
    Key("train", "record_time", "bool", False, "write wall-clock seconds to epoch logs (breaks byte-identity)"),
    Key("eval", "phase_c_eval", "str", "reconstructed", "retrained classifier is tested on reconstructed or original images"),
    Key("eval", "phase_c_mode", "str", "replace", "reconstructed data replaces (replace) or joins (union) the originals"),
    Key("eval", "gallery_n", "int", 16, "images in the prediction gallery"),
    Key("eval", "batch_size", "int", 256, "inference batch size"),
)

KEY_INDEX = {k.dotted: k for k in KEYS}


def _fmt(key: Key, value) -> str:
    if key.type == "bool":
        return "true" if value else "false"
    if key.type == "ints":
        return ",".join(str(v) for v in value)
    if key.type == "float":
        return repr(float(value))
    return str(value)


def _parse(key: Key, text: str):
    text = text.strip()
    try:
        if key.type == "int":
            return int(text)
        if key.type == "float":
            return float(text)
        if key.type == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if key.type == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key.dotted}: {exc}") from exc


def help_text() -> str:
    """Every config key with its default, grouped by section."""
    lines = ["config keys (file: [section] key = value; flag: --set section.key=value):"]
    for section in SECTIONS:
        lines.append(f"  [{section}]")
        for k in KEYS:
            if k.section == section:
                lines.append(f"    {k.name} = {_fmt(k, k.default)!s:<14} {k.help}")
    return "\n".join(lines)


class RunConfig:
    """Resolved configuration: defaults, then the config file, then flag overrides."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k.dotted: k.default for k in KEYS}
        for dotted, v in (values or {}).items():
            self.set(dotted, v)

    def set(self, dotted: str, value) -> None:
        key = KEY_INDEX.get(dotted)
        if key is None:
            raise ConfigError(f"unknown config key {dotted!r}")
        self.values[dotted] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, dotted: str):
        return self.values[dotted]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path:
            cfg.merge_file(path)
        for item in overrides:
            dotted, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not section.key=value")
            cfg.set(dotted.strip(), value)
        return cfg

    def merge_file(self, path: str | Path) -> None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                           interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(text, source=str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for name, value in parser.items(section):
                self.set(f"{section}.{name}", value)

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines += [f"{k.name} = {_fmt(k, self.values[k.dotted])}" for k in KEYS if k.section == section]
            lines.append("")
        return "\n".join(lines)

    def items(self) -> list[tuple[str, str]]:
        return [(k.dotted, _fmt(k, self.values[k.dotted])) for k in KEYS]

    # ------------------------------------------------------------- typed views

    @property
    def seed(self) -> int:
        return self["train.seed"]

    def resnet_config(self) -> ResNetConfig:
        preset = self["model.preset"]
        if preset not in RESNET_PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(RESNET_PRESETS)}, got {preset!r}")
        base = ResNetConfig.preset(preset)
        changes = {"zero_init_residual": self["model.zero_init_residual"]}
        if self["model.stage_blocks"]:
            changes["stage_blocks"] = self["model.stage_blocks"]
        if self["model.base_width"]:
            changes["base_width"] = self["model.base_width"]
        if self["data.image_size"]:
            s = self["data.image_size"]
            changes["input_size"] = (s, s, base.input_size[2])
        from dataclasses import replace

        cfg = replace(base, **changes)
        cfg.validate()
        return cfg

    def image_size(self) -> tuple[int, int]:
        h, w, _ = self.resnet_config().input_size
        return h, w

    def dae_config(self) -> DAEConfig:
        cfg = DAEConfig(input_size=self.resnet_config().input_size,
                        encoder_channels=self["dae.encoder_channels"],
                        decoder_channels=self["dae.decoder_channels"] or None,
                        kernel_size=self["dae.kernel_size"])
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(epochs=self["train.epochs"], batch_size=self["train.batch_size"],
                          optimizer=self["train.optimizer"], lr=self["train.lr"], momentum=self["train.momentum"],
                          beta1=self["train.beta1"], beta2=self["train.beta2"],
                          weight_decay=self["train.weight_decay"], seed=self.seed,
                          checkpoint_every=self["train.checkpoint_every"], record_time=self["train.record_time"],
                          early_stop_patience=self["train.early_stop_patience"])
        cfg.validate()
        return cfg

    def dae_train_config(self) -> TrainConfig:
        from dataclasses import replace

        cfg = replace(self.train_config(), epochs=self["dae.epochs"], batch_size=self["dae.batch_size"],
                      lr=self["dae.lr"], noise_std=self["dae.noise_std"], early_stop_patience=0)
        cfg.validate()
        return cfg

    def augment_spec(self) -> AugmentSpec:
        try:
            return AugmentSpec(self["data.hflip_p"], self["data.vflip_p"], self["data.rotation_deg"],
                               self["data.translate_frac"], self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hybrid_config(self) -> HybridConfig:
        cfg = HybridConfig(test_fraction=self["data.test_fraction"], val_fraction=self["data.val_fraction"],
                           balance=self["data.balance"], augment=self.augment_spec(),
                           phase_c_eval=self["eval.phase_c_eval"], phase_c_mode=self["eval.phase_c_mode"],
                           gallery_n=self["eval.gallery_n"], seed=self.seed)
        cfg.validate()
        return cfg
