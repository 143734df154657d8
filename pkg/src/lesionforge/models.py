"""Residual classifiers, the convolutional autoencoder, and checkpoint files."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DataIOError, DimensionError, FormatError
from .layers import (BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Layer, MaxPool2d, ReLU,
                     Sigmoid, UpsampleNearest)
from .tensor import Parameter, Tensor, load_tensor, save_tensor


@dataclass(frozen=True)
class ResNetConfig:
    stage_blocks: tuple[int, ...] = (3, 4, 23, 3)
    base_width: int = 64
    num_classes: int = 7
    input_size: tuple[int, int, int] = (224, 224, 3)  # H, W, C
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_maxpool: bool = True
    expansion: int = 4
    zero_init_residual: bool = False
    zero_head: bool = False

    @classmethod
    def preset(cls, name: str, **overrides) -> "ResNetConfig":
        try:
            base = RESNET_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown resnet preset {name!r}; choose from {sorted(RESNET_PRESETS)}") from None
        return replace(base, **overrides)

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or any(int(b) < 1 for b in self.stage_blocks):
            raise ConfigError(f"stage_blocks must be 4 positive ints, got {self.stage_blocks}")
        if self.base_width < 1 or self.num_classes < 1 or self.expansion < 1:
            raise ConfigError("base_width, num_classes and expansion must be positive")
        h, w, c = self.input_size
        if c < 1 or min(h, w) < self.stem_kernel:
            raise ConfigError(
                f"input {h}x{w}x{c} is smaller than the {self.stem_kernel}x{self.stem_kernel} stem receptive field")


RESNET_PRESETS = {
    "resnet101": ResNetConfig(),
    "resnet50": ResNetConfig(stage_blocks=(3, 4, 6, 3)),
    "tiny": ResNetConfig(stage_blocks=(1, 1, 1, 1), base_width=8, input_size=(32, 32, 3)),
    # gradient-check size; no stem pool so stem BN shifts keep a nonzero gradient
    "micro": ResNetConfig(stage_blocks=(1, 1, 1, 1), base_width=2, input_size=(16, 16, 3), stem_maxpool=False),
}


@dataclass(frozen=True)
class DAEConfig:
    input_size: tuple[int, int, int] = (32, 32, 3)  # H, W, C
    encoder_channels: tuple[int, ...] = (16, 8)
    decoder_channels: tuple[int, ...] | None = None
    kernel_size: int = 3

    def decoder_ladder(self) -> tuple[int, ...]:
        if self.decoder_channels is not None:
            return tuple(self.decoder_channels)
        enc = tuple(self.encoder_channels)
        return tuple(reversed(enc[:-1])) + (enc[0],)

    def latent_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_size
        f = 2 ** len(self.encoder_channels)
        return (self.encoder_channels[-1], h // f, w // f)

    def validate(self) -> None:
        h, w, c = self.input_size
        if not self.encoder_channels or any(ch < 1 for ch in self.encoder_channels):
            raise ConfigError("encoder_channels must be a non-empty list of positive ints")
        if len(self.decoder_ladder()) != len(self.encoder_channels):
            raise ConfigError("decoder ladder must have one conv per encoder stage")
        f = 2 ** len(self.encoder_channels)
        if h % f or w % f:
            raise ConfigError(f"input {h}x{w} is not divisible by the total encoder stride {f}")
        latent = int(np.prod(self.latent_shape()))
        if latent >= h * w * c:
            raise ConfigError(
                f"latent {self.latent_shape()} has {latent} elements, not fewer than the {h * w * c} input elements")


class Bottleneck(Layer):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand, each followed by BN; additive shortcut."""

    kind = "bottleneck"

    def __init__(self, name, in_channels, width, stride, expansion, projection, dtype=np.float32):
        super().__init__(name)
        out_channels = width * expansion
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, width, 1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", width, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", width, width, 3, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", width, dtype=dtype)
        self.conv3 = Conv2d(f"{name}.conv3", width, out_channels, 1, bias=False, dtype=dtype)
        self.bn3 = BatchNorm2d(f"{name}.bn3", out_channels, dtype=dtype)
        self.shortcut_conv = self.shortcut_bn = None
        if projection:
            self.shortcut_conv = Conv2d(f"{name}.shortcut.conv", in_channels, out_channels, 1,
                                        stride=stride, bias=False, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(f"{name}.shortcut.bn", out_channels, dtype=dtype)

    @property
    def shortcut(self) -> str:
        return "projection" if self.shortcut_conv is not None else "identity"

    def residual(self, x: Tensor, train: bool = False) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x), train))
        out = ops.relu(self.bn2(self.conv2(out), train))
        return self.bn3(self.conv3(out), train)

    def shortcut_path(self, x: Tensor, train: bool = False) -> Tensor:
        if self.shortcut_conv is None:
            return x
        return self.shortcut_bn(self.shortcut_conv(x), train)

    def forward(self, x, train=False):
        return ops.relu(ops.add(self.residual(x, train), self.shortcut_path(x, train)))

    def children(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.shortcut_conv is not None:
            layers += [self.shortcut_conv, self.shortcut_bn]
        return layers

    def hyper(self):
        return {"stride": self.conv2.stride, "shortcut": self.shortcut}


class ModelGraph:
    """Ordered layers plus the config they were built from.

    ``kind`` is ``"classifier"``, ``"autoencoder"`` or ``"empty"``. For an
    autoencoder the first ``encoder_depth`` top-level layers form the encoder.
    """

    def __init__(self, kind: str, config, layers: Sequence[Layer] = (), encoder_depth: int = 0):
        self.kind = kind
        self.config = config
        self.layers = list(layers)
        self.encoder_depth = encoder_depth
        names = [p.name for p in self._all_parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("parameter names must be unique")

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._check_input(x)
        for layer in self.layers:
            x = layer(x, train)
        return x

    __call__ = forward

    def encode(self, x: Tensor, train: bool = False) -> Tensor:
        self._check_input(x)
        for layer in self.layers[: self.encoder_depth]:
            x = layer(x, train)
        return x

    def decode(self, z: Tensor, train: bool = False) -> Tensor:
        for layer in self.layers[self.encoder_depth:]:
            z = layer(z, train)
        return z

    def _check_input(self, x: Tensor) -> None:
        if self.config is None:
            return
        h, w, c = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise DimensionError(f"model expects input [N, {c}, {h}, {w}], got {list(x.shape)}")

    def walk(self) -> Iterable[Layer]:
        for layer in self.layers:
            yield from layer.walk()

    def _all_parameters(self) -> list[Parameter]:
        return [p for layer in self.walk() for p in layer.own_parameters()]

    def parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._all_parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.walk():
            out.update(layer.own_buffers())
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        owner = name.rsplit(".", 1)[0]
        for layer in self.walk():
            if layer.name == owner:
                layer.set_buffer(name, value)
                return
        raise KeyError(name)

    @property
    def dtype(self) -> np.dtype:
        params = self._all_parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def astype(self, dtype) -> "ModelGraph":
        """Convert parameters and buffers in place; returns ``self``."""
        for p in self._all_parameters():
            arr = p.data.astype(dtype)
            arr.flags.writeable = False
            p.data = arr
        for name, value in self.buffers().items():
            self.set_buffer(name, value.astype(dtype))
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise FormatError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            p.assign(state[name])
        for name in buffers:
            self.set_buffer(name, state[name])

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def config_items(self) -> list[tuple[str, str]]:
        if self.config is None:
            return [("model.kind", self.kind)]
        items = [("model.kind", self.kind)]
        for f in fields(self.config):
            items.append((f"model.{f.name}", _fmt_value(getattr(self.config, f.name))))
        return items

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.config_items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def blocks(self) -> list[Bottleneck]:
        return [layer for layer in self.layers if isinstance(layer, Bottleneck)]

    def topology(self) -> list[tuple[str, str]]:
        return [(b.name, b.shortcut) for b in self.blocks()]


def count_conv_layers(graph: ModelGraph) -> int:
    """Conv layers including projection shortcuts; pooling and dense layers excluded."""
    return sum(1 for layer in graph.walk() if isinstance(layer, Conv2d))


def _he_init(rng: np.random.Generator, conv: Conv2d) -> None:
    f, c, kh, kw = conv.weight.shape
    conv.weight.assign(rng.standard_normal(conv.weight.shape) * np.sqrt(2.0 / (c * kh * kw)))


def build_resnet(cfg: ResNetConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Stem conv, max-pool, four stages of bottleneck blocks, global average pool, dense head."""
    cfg.validate()
    h, w, c = cfg.input_size
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    stem = Conv2d("stem.conv", c, cfg.base_width, cfg.stem_kernel, stride=cfg.stem_stride,
                  padding=cfg.stem_kernel // 2, bias=False, dtype=dtype)
    layers += [stem, BatchNorm2d("stem.bn", cfg.base_width, dtype=dtype), ReLU("stem.relu")]
    size = (ops.conv_output_size(h, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel // 2),
            ops.conv_output_size(w, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel // 2))
    if cfg.stem_maxpool:
        layers.append(MaxPool2d("stem.pool", 3, 2, 1))
        size = tuple(ops.conv_output_size(s, 3, 2, 1) for s in size)
    channels = cfg.base_width
    for stage, n_blocks in enumerate(cfg.stage_blocks):
        width = cfg.base_width * 2 ** stage
        for b in range(n_blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            block = Bottleneck(f"stage{stage + 1}.block{b}", channels, width, stride, cfg.expansion,
                               projection=(b == 0), dtype=dtype)
            layers.append(block)
            channels = width * cfg.expansion
            size = tuple(ops.conv_output_size(s, 3, stride, 1) for s in size)
    if min(size) < 1:
        raise ConfigError(f"input {h}x{w} collapses to zero spatial size")
    layers += [GlobalAvgPool("pool"), Dense("head", channels, cfg.num_classes, dtype=dtype)]

    graph = ModelGraph("classifier", cfg, layers)
    for layer in graph.walk():
        if isinstance(layer, Conv2d):
            _he_init(rng, layer)
    head = layers[-1]
    if not cfg.zero_head:
        head.weight.assign(rng.standard_normal(head.weight.shape) * np.sqrt(1.0 / channels))
    if cfg.zero_init_residual:
        for block in graph.blocks():
            block.bn3.gamma.assign(np.zeros(block.bn3.gamma.shape))
    return graph


def build_dae(cfg: DAEConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Stride-2 conv encoder, nearest-upsample + conv decoder, conv + sigmoid output."""
    cfg.validate()
    _, _, c = cfg.input_size
    k, pad = cfg.kernel_size, cfg.kernel_size // 2
    layers: list[Layer] = []
    prev = c
    for i, ch in enumerate(cfg.encoder_channels):
        layers += [Conv2d(f"encoder.conv{i}", prev, ch, k, stride=2, padding=pad, dtype=dtype),
                   ReLU(f"encoder.relu{i}")]
        prev = ch
    encoder_depth = len(layers)
    for i, ch in enumerate(cfg.decoder_ladder()):
        layers += [UpsampleNearest(f"decoder.up{i}", 2),
                   Conv2d(f"decoder.conv{i}", prev, ch, k, padding=pad, dtype=dtype),
                   ReLU(f"decoder.relu{i}")]
        prev = ch
    layers += [Conv2d("decoder.out", prev, c, k, padding=pad, dtype=dtype), Sigmoid("decoder.sigmoid")]
    graph = ModelGraph("autoencoder", cfg, layers, encoder_depth=encoder_depth)
    rng = np.random.default_rng(seed)
    for layer in graph.walk():
        if isinstance(layer, Conv2d):
            _he_init(rng, layer)
    return graph


def predict(graph: ModelGraph, batch: Tensor | np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class probabilities [N, K] and argmax labels (ties go to the lower index)."""
    if graph.kind != "classifier":
        raise ConfigError(f"predict needs a classifier, got a {graph.kind}")
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    graph._check_input(Tensor(data[:1]))
    chunks = []
    for start in range(0, data.shape[0], batch_size):
        logits = graph.forward(Tensor(data[start:start + batch_size].astype(graph.dtype, copy=False)))
        chunks.append(ops.softmax_array(logits.data))
    probs = np.concatenate(chunks, axis=0)
    return probs, probs.argmax(axis=1)


# ----------------------------------------------------------------- config text

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple) or default is None:
        if text.strip().lower() == "none":
            return None
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def config_from_items(items: dict[str, str]):
    """Rebuild a :class:`ResNetConfig` or :class:`DAEConfig` from ``model.*`` metadata."""
    kind = items.get("model.kind")
    cls = {"classifier": ResNetConfig, "autoencoder": DAEConfig}.get(kind)
    if cls is None:
        raise FormatError(f"cannot rebuild a model of kind {kind!r}")
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        key = f"model.{f.name}"
        if key in items:
            kwargs[f.name] = _parse_like(items[key], getattr(defaults, f.name))
    return cls(**kwargs)


def graph_from_meta(meta: dict[str, str], dtype=np.float32) -> ModelGraph:
    cfg = config_from_items(meta)
    build = build_resnet if isinstance(cfg, ResNetConfig) else build_dae
    return build(cfg, seed=0, dtype=dtype)


# ----------------------------------------------------------------- checkpoints

META_FILE = "meta.txt"
TENSOR_SUFFIX = ".ltd"


def write_meta(path: Path, meta: dict[str, object]) -> None:
    lines = []
    for key, value in meta.items():
        text = value if isinstance(value, str) else _fmt_value(value)
        if "\n" in key or "=" in key or "\n" in text:
            raise FormatError(f"metadata entry {key!r} cannot be written as a key=value line")
        lines.append(f"{key}={text}\n")
    path.write_text("".join(lines), encoding="utf-8")


def read_meta(path: Path) -> dict[str, str]:
    meta: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed metadata line {line!r}")
        meta[key] = value
    return meta


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, object]) -> Path:
    """Write named tensors as ``<name>.ltd`` files plus ``meta.txt`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob(f"*{TENSOR_SUFFIX}"):
        if stale.stem not in tensors:
            stale.unlink()
    for name, arr in tensors.items():
        save_tensor(path / f"{name}{TENSOR_SUFFIX}", np.asarray(arr))
    write_meta(path / META_FILE, meta)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not (path / META_FILE).is_file():
        raise DataIOError(f"{path}: not a checkpoint directory (no {META_FILE})")
    tensors = {f.name[: -len(TENSOR_SUFFIX)]: load_tensor(f).data
               for f in sorted(path.glob(f"*{TENSOR_SUFFIX}"))}
    return tensors, read_meta(path / META_FILE)


def save_model(path: str | Path, graph: ModelGraph, extra_meta: dict[str, object] | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> Path:
    meta: dict[str, object] = {"config_hash": graph.config_hash()}
    meta.update(dict(graph.config_items()))
    meta.update(extra_meta or {})
    tensors = dict(graph.state())
    tensors.update(extra_tensors or {})
    return save_checkpoint(path, tensors, meta)


def load_model(path: str | Path, dtype=np.float32) -> tuple[ModelGraph, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (graph, meta, tensors not owned by the graph)."""
    tensors, meta = load_checkpoint(path)
    graph = graph_from_meta(meta, dtype=dtype)
    graph.load_state(tensors)
    owned = set(graph.state())
    return graph, meta, {k: v for k, v in tensors.items() if k not in owned}
