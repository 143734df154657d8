"""Optimizers, training loops, dataset reconstruction and the three-phase hybrid run."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .data import AugmentSpec, Dataset, balance_by_oversampling, normalize, stratified_split
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .layers import recon_loss
from .models import (DAEConfig, ModelGraph, ResNetConfig, build_dae, build_resnet, load_checkpoint,
                     predict, save_model)
from .tensor import GradientTape, Tensor, backward

log = logging.getLogger(__name__)

PHASE_C_SEED_OFFSET = 2
DAE_SEED_OFFSET = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 1
    record_time: bool = False
    noise_std: float = 0.0  # input corruption for autoencoder training
    early_stop_patience: int = 0  # 0 = train all epochs
    loss: str | None = None  # cross_entropy | recon; None picks by model kind

    def validate(self, kind: str | None = None) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # lr == 0 is allowed: a frozen run is a useful control
        if not self.lr >= 0:
            raise ConfigError("learning rate must be >= 0")
        if self.early_stop_patience < 0 or self.checkpoint_every < 1 or self.noise_std < 0:
            raise ConfigError("early_stop_patience >= 0, checkpoint_every >= 1 and noise_std >= 0 required")
        expected = {"classifier": "cross_entropy", "autoencoder": "recon"}.get(kind or "")
        if self.loss is not None and self.loss not in ("cross_entropy", "recon"):
            raise ConfigError(f"loss must be cross_entropy or recon, got {self.loss!r}")
        if self.loss is not None and expected and self.loss != expected:
            raise ConfigError(f"a {kind} trains with {expected}, not {self.loss}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"optimizer must be adam or sgd_momentum, got {self.optimizer!r}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch)] + [_fmt(getattr(self, f.name)) for f in fields(self)[1:]]


EPOCH_LOG_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"]


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_epoch_logs(path: str | Path, logs: Sequence[EpochLog]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_LOG_HEADER)
        for row in logs:
            w.writerow(row.row())
    return path


def read_epoch_logs(path: str | Path) -> list[EpochLog]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [EpochLog(int(r["epoch"]), *(float(r[k]) for k in EPOCH_LOG_HEADER[1:])) for r in reader]


# ----------------------------------------------------------------- optimizers

class Optimizer:
    """Updates named parameters from a gradient map; state is checkpointable."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def step(self, grads: dict[str, Tensor]) -> None:
        self.steps += 1
        for name, p in self.params.items():
            g = grads[name].data if name in grads else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.assign(self._update(name, p.data, g))

    def _update(self, name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {"steps": np.array([self.steps], dtype=np.float64)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.steps = int(state["steps"][0])


class SGDMomentum(Optimizer):
    """``v = momentum * v + g``; ``w = w - lr * v``."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def _update(self, name, w, g):
        v = self.momentum * self.velocity[name] + g
        self.velocity[name] = v.astype(w.dtype)
        return w - self.lr * self.velocity[name]

    def state(self):
        out = super().state()
        out.update({f"velocity.{k}": v for k, v in self.velocity.items()})
        return out

    def load_state(self, state):
        super().load_state(state)
        for k in self.velocity:
            self.velocity[k] = np.array(state[f"velocity.{k}"])


class Adam(Optimizer):
    """Adam with bias correction."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def _update(self, name, w, g):
        t = self.steps
        self.m[name] = (self.beta1 * self.m[name] + (1 - self.beta1) * g).astype(w.dtype)
        self.v[name] = (self.beta2 * self.v[name] + (1 - self.beta2) * g * g).astype(w.dtype)
        m_hat = self.m[name] / (1 - self.beta1 ** t)
        v_hat = self.v[name] / (1 - self.beta2 ** t)
        return w - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self):
        out = super().state()
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state):
        super().load_state(state)
        for k in self.m:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


def make_optimizer(params: dict, cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    if cfg.optimizer == "sgd_momentum":
        return SGDMomentum(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


# ----------------------------------------------------------------- shared loop helpers

def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one joins the previous batch."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


OPT_PREFIX = "optim."


@dataclass
class TrainResult:
    model: ModelGraph
    logs: list[EpochLog]
    best_epoch: int = 0
    best_metric: float = float("nan")
    best_state: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)


def _save(out_dir: Path | None, tag: str, model: ModelGraph, opt: Optimizer, epoch: int,
          cfg: TrainConfig, metrics: dict, extra_meta: dict | None = None,
          extra_tensors: dict | None = None) -> Path | None:
    if out_dir is None:
        return None
    meta = {"epoch": epoch, "seed": cfg.seed}
    meta.update({f"metric.{k}": v for k, v in metrics.items()})
    meta.update(extra_meta or {})
    tensors = {f"{OPT_PREFIX}{k}": v for k, v in opt.state().items()}
    tensors.update(extra_tensors or {})
    return save_model(out_dir / tag, model, meta, tensors)


def _resume(model: ModelGraph, opt: Optimizer, path: str | Path) -> int:
    tensors, meta = load_checkpoint(path)
    model.load_state(tensors)
    opt.load_state({k[len(OPT_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPT_PREFIX)})
    return int(meta["epoch"])


def _check_loss(value: float, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch}; training aborted")


# ----------------------------------------------------------------- classifier

def evaluate_classifier(model: ModelGraph, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    x = data.images()
    y = data.labels
    total = 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        xb = Tensor(x[start:start + batch_size].astype(model.dtype, copy=False))
        yb = y[start:start + batch_size]
        logits = model.forward(xb, train=False)
        total += float(ops.softmax_cross_entropy(logits, yb).data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total / len(data), correct / len(data)


def train_classifier(model: ModelGraph, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                     out_dir: str | Path | None = None, prefix: str = "classifier",
                     resume_from: str | Path | None = None, extra_meta: dict | None = None,
                     extra_tensors: dict | None = None) -> TrainResult:
    """Minibatch softmax cross-entropy training for ``cfg.epochs`` epochs.

    With ``out_dir`` set, writes ``<prefix>_last`` every ``checkpoint_every``
    epochs and ``<prefix>_best`` / ``<prefix>_final`` checkpoints.
    """
    cfg.validate(model.kind)
    if model.kind != "classifier":
        raise ContractError("train_classifier needs a classifier model")
    if len(train) == 0:
        raise ContractError("training set is empty")
    k = model.config.num_classes
    if len(train.class_names) != k:
        raise DimensionError(f"head width {k} != {len(train.class_names)} classes")
    out = Path(out_dir) if out_dir is not None else None
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    start = _resume(model, opt, resume_from) if resume_from else 0
    x_all = train.images().astype(model.dtype, copy=False)
    y_all = train.labels
    result = TrainResult(model, [])
    best = -1.0
    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, correct = 0.0, 0
        for idx in minibatches(len(train), cfg.batch_size, _epoch_rng(cfg.seed, epoch)):
            xb, yb = Tensor(x_all[idx]), y_all[idx]
            with GradientTape() as tape:
                logits = model.forward(xb, train=True)
                loss = ops.softmax_cross_entropy(logits, yb)
            value = float(loss.data)
            _check_loss(value, epoch)
            opt.step(backward(tape, loss))
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        val_loss, val_acc = evaluate_classifier(model, val) if val is not None and len(val) else (math.nan, math.nan)
        row = EpochLog(epoch, loss_sum / len(train), correct / len(train), val_loss, val_acc,
                       time.perf_counter() - t0 if cfg.record_time else 0.0)
        result.logs.append(row)
        log.info("%s epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", prefix, epoch,
                 row.train_loss, row.train_acc, row.val_loss, row.val_acc)
        metrics = {"train_loss": row.train_loss, "train_acc": row.train_acc,
                   "val_loss": row.val_loss, "val_acc": row.val_acc}
        score = row.val_acc if not math.isnan(row.val_acc) else row.train_acc
        if score > best:
            best = score
            result.best_epoch, result.best_metric = epoch, score
            result.best_state = {n: a.copy() for n, a in model.state().items()}
            p = _save(out, f"{prefix}_best", model, opt, epoch, cfg, metrics, extra_meta, extra_tensors)
            if p:
                result.checkpoints["best"] = p
        stop = bool(cfg.early_stop_patience) and epoch - result.best_epoch >= cfg.early_stop_patience
        done = epoch == cfg.epochs or stop
        if out is not None and (epoch % cfg.checkpoint_every == 0 or done):
            result.checkpoints["last"] = _save(out, f"{prefix}_last", model, opt, epoch, cfg, metrics, extra_meta, extra_tensors)
        if done:
            p = _save(out, f"{prefix}_final", model, opt, epoch, cfg, metrics, extra_meta, extra_tensors)
            if p:
                result.checkpoints["final"] = p
        if stop:
            log.info("%s early stop at epoch %d (best %d)", prefix, epoch, result.best_epoch)
            break
    return result


# ----------------------------------------------------------------- autoencoder

def _recon_pass(dae: ModelGraph, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [dae.forward(Tensor(data[i:i + batch_size].astype(dae.dtype, copy=False))).data
            for i in range(0, len(data), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate_dae(dae: ModelGraph, data: Dataset) -> float:
    """Literal ``1/2 sum ||y - x||^2`` over the whole dataset."""
    x = data.images().astype(dae.dtype, copy=False)
    y = _recon_pass(dae, x)
    return float(recon_loss(Tensor(y), Tensor(x)).data)


def train_dae(model: ModelGraph, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
              out_dir: str | Path | None = None, prefix: str = "dae",
              resume_from: str | Path | None = None) -> TrainResult:
    """Minimize the reconstruction error; steps use the batch mean, logs use the literal sum.

    ``train_loss`` is the sum of per-batch literal losses over the epoch; the
    accuracy columns are NaN.
    """
    cfg.validate(model.kind)
    if model.kind != "autoencoder":
        raise ContractError("train_dae needs an autoencoder model")
    if len(train) == 0:
        raise ContractError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    opt = make_optimizer(model.parameters(), cfg)
    start = _resume(model, opt, resume_from) if resume_from else 0
    x_all = train.images().astype(model.dtype, copy=False)
    model._check_input(Tensor(x_all[:1]))
    result = TrainResult(model, [])
    best = math.inf
    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        total = 0.0
        for idx in minibatches(len(train), cfg.batch_size, rng):
            target = Tensor(x_all[idx])
            source = target
            if cfg.noise_std > 0:
                noisy = x_all[idx] + rng.normal(0, cfg.noise_std, x_all[idx].shape).astype(model.dtype)
                source = Tensor(np.clip(noisy, 0, 1))
            with GradientTape() as tape:
                y = model.forward(source, train=True)
                literal = recon_loss(y, target)
                loss = ops.scale(literal, 1.0 / len(idx))
            value = float(literal.data)
            _check_loss(value, epoch)
            opt.step(backward(tape, loss))
            total += value
        val_loss = evaluate_dae(model, val) if val is not None and len(val) else math.nan
        row = EpochLog(epoch, total, math.nan, val_loss, math.nan,
                       time.perf_counter() - t0 if cfg.record_time else 0.0)
        result.logs.append(row)
        log.info("%s epoch %d recon loss %.4f", prefix, epoch, total)
        metrics = {"train_loss": total, "val_loss": val_loss}
        if total < best:
            best = total
            result.best_epoch, result.best_metric = epoch, total
            result.best_state = {n: a.copy() for n, a in model.state().items()}
        if out is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            result.checkpoints["last"] = _save(out, f"{prefix}_last", model, opt, epoch, cfg, metrics)
        if epoch == cfg.epochs:
            p = _save(out, f"{prefix}_final", model, opt, epoch, cfg, metrics)
            if p:
                result.checkpoints["final"] = p
    return result


def reconstruct_dataset(dae: ModelGraph, dataset: Dataset, batch_size: int = 256) -> Dataset:
    """Replace every image by ``decode(encode(image))``; ids, labels and order are kept."""
    if dae.kind != "autoencoder":
        raise ContractError("reconstruct_dataset needs an autoencoder model")
    if len(dataset) == 0:
        return Dataset((), dataset.class_names, "reconstructed")
    x = dataset.images()
    h, w, c = dae.config.input_size
    if x.shape[1:] != (c, h, w):
        raise DimensionError(f"dataset images {x.shape[1:]} do not match autoencoder input {(c, h, w)}")
    y = _recon_pass(dae, x, batch_size).astype(np.float32)
    return dataset.with_images(y, provenance="reconstructed")


# ----------------------------------------------------------------- hybrid procedure

@dataclass(frozen=True)
class HybridConfig:
    test_fraction: float = 0.2
    val_fraction: float = 0.1  # carved from the training split for checkpoint selection
    balance: bool = True
    augment: AugmentSpec = AugmentSpec()
    phase_c_eval: str = "reconstructed"  # or "original"
    phase_c_mode: str = "replace"  # or "union"
    gallery_n: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.phase_c_eval not in ("reconstructed", "original"):
            raise ConfigError(f"phase_c_eval must be reconstructed or original, got {self.phase_c_eval!r}")
        if self.phase_c_mode not in ("replace", "union"):
            raise ConfigError(f"phase_c_mode must be replace or union, got {self.phase_c_mode!r}")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1) and val_fraction in [0, 1)")
        if self.gallery_n < 0:
            raise ConfigError("gallery_n must be >= 0")


@dataclass
class HybridReport:
    reports: dict  # phase name -> ClassReport
    checkpoints: dict  # phase name -> {tag: path}
    logs: dict  # phase name -> list[EpochLog]
    sizes: dict  # split name -> sample count
    out_dir: Path | None = None
    initial_hashes: dict = field(default_factory=dict)


PHASES = ("phase_a_original", "phase_b_autoencoder", "phase_c_reconstructed")


def classifier_predictions(model: ModelGraph, data: Dataset):
    from .report import Predictions

    probs, labels = predict(model, data.images())
    return Predictions(tuple(data.ids), data.labels, labels, probs)


def latent_centroid_predictions(dae: ModelGraph, train: Dataset, test: Dataset, batch_size: int = 256):
    """Nearest class centroid in the autoencoder's latent space.

    Scores are ``softmax(-||z - c_k||^2 / D)`` with ``D`` the latent size, so the
    autoencoder phase gets its own class report without training a new head.
    """
    from .report import Predictions

    def embed(ds):
        x = ds.images().astype(dae.dtype, copy=False)
        z = [dae.encode(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(z).reshape(len(x), -1).astype(np.float64)

    z_train, z_test = embed(train), embed(test)
    k = len(train.class_names)
    centroids = np.stack([z_train[train.labels == c].mean(axis=0) for c in range(k)])
    d2 = ((z_test[:, None, :] - centroids[None]) ** 2).sum(axis=2) / z_test.shape[1]
    probs = ops.softmax_array(-d2)
    return Predictions(tuple(test.ids), test.labels, probs.argmax(axis=1), probs)


def _write_config(path: Path, items: Sequence[tuple[str, object]]) -> None:
    from .models import _fmt_value

    lines = [f"{k} = {v if isinstance(v, str) else _fmt_value(v)}" for k, v in items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def hybrid_config_items(resnet_cfg: ResNetConfig, dae_cfg: DAEConfig, train_cfg: TrainConfig,
                        dae_train_cfg: TrainConfig, hybrid_cfg: HybridConfig) -> list[tuple[str, object]]:
    items: list[tuple[str, object]] = []
    for prefix, obj in (("model", resnet_cfg), ("dae", dae_cfg), ("train", train_cfg),
                        ("dae_train", dae_train_cfg), ("hybrid", hybrid_cfg)):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if f.name == "augment":
                items += [(f"hybrid.augment.{g.name}", getattr(value, g.name)) for g in fields(value)]
            else:
                items.append((f"{prefix}.{f.name}", "none" if value is None else value))
    return items


@dataclass(frozen=True)
class Splits:
    train_raw: Dataset  # balanced, un-normalized
    val_raw: Dataset | None
    test_raw: Dataset
    train: Dataset  # normalized with the training statistics
    val: Dataset | None
    test: Dataset


def prepare_splits(raw: Dataset, cfg: HybridConfig) -> Splits:
    """Stratified test split, optional validation split, oversampling of the training part, normalization."""
    train_raw, test_raw = stratified_split(raw, cfg.test_fraction, cfg.seed)
    val_raw = None
    if cfg.val_fraction > 0:
        train_raw, val_raw = stratified_split(train_raw, cfg.val_fraction, cfg.seed + 1)
        if len(val_raw) == 0:  # every class rounded to zero validation samples
            val_raw = None
    if cfg.balance:
        train_raw = balance_by_oversampling(train_raw, cfg.augment)
    train_n = normalize(train_raw)
    stats = train_n.norm_stats
    return Splits(train_raw, val_raw, test_raw, train_n,
                  normalize(val_raw, stats) if val_raw is not None else None, normalize(test_raw, stats))


def norm_tensors(stats) -> dict[str, np.ndarray]:
    return {"norm.mean": np.array(stats.mean, dtype=np.float64), "norm.std": np.array(stats.std, dtype=np.float64)}


def norm_from_tensors(tensors: dict[str, np.ndarray]):
    from .data import NormStats

    if "norm.mean" not in tensors:
        return None
    return NormStats(tuple(float(v) for v in tensors["norm.mean"]), tuple(float(v) for v in tensors["norm.std"]))


def run_hybrid(raw: Dataset, resnet_cfg: ResNetConfig, dae_cfg: DAEConfig, train_cfg: TrainConfig,
               dae_train_cfg: TrainConfig | None = None, hybrid_cfg: HybridConfig = HybridConfig(),
               out_dir: str | Path | None = None, config_text: str | None = None,
               dtype=np.float32) -> HybridReport:
    """Direct classification, autoencoder reconstruction, then retraining on the reconstructed data.

    ``raw`` holds un-normalized [0, 1] images at the models' input size. The
    classifier in each phase is evaluated with its final weights on the held-out
    test split; best-validation checkpoints are saved alongside.
    """
    from .report import comparison_table, emit_curves, prediction_gallery, report_from_predictions, write_predictions, write_report

    dae_train_cfg = dae_train_cfg or train_cfg
    hybrid_cfg.validate()
    resnet_cfg.validate()
    dae_cfg.validate()
    train_cfg.validate("classifier")
    dae_train_cfg.validate("autoencoder")
    h, w, c = resnet_cfg.input_size
    if (dae_cfg.input_size != resnet_cfg.input_size or len(raw) == 0
            or raw.samples[0].image.shape != (c, h, w)):
        raise DimensionError(f"raw images, classifier input {resnet_cfg.input_size} and autoencoder input "
                             f"{dae_cfg.input_size} must all agree")
    if resnet_cfg.num_classes != len(raw.class_names):
        raise DimensionError(f"head width {resnet_cfg.num_classes} != {len(raw.class_names)} classes")

    out = Path(out_dir) if out_dir is not None else None
    dirs = {}
    if out is not None:
        for sub in ("checkpoints", "logs", "reports"):
            dirs[sub] = out / sub
            dirs[sub].mkdir(parents=True, exist_ok=True)
        if config_text is None:
            _write_config(out / "config.txt", hybrid_config_items(
                resnet_cfg, dae_cfg, train_cfg, dae_train_cfg, hybrid_cfg))
        else:
            (out / "config.txt").write_text(config_text, encoding="utf-8")

    def sub(kind, name):
        return dirs[kind] / name if out is not None else None

    seed = hybrid_cfg.seed
    # (1) split, balance, normalize
    sp = prepare_splits(raw, hybrid_cfg)
    train_raw, val_raw, test_raw = sp.train_raw, sp.val_raw, sp.test_raw
    train_n, val_n, test_n = sp.train, sp.val, sp.test
    report = HybridReport({}, {}, {}, {"train": len(train_raw), "val": len(val_raw) if val_raw else 0,
                                       "test": len(test_raw)}, out)

    def finish(phase, preds, logs):
        rep = report_from_predictions(preds, raw.class_names, title=phase)
        report.reports[phase] = rep
        report.logs[phase] = logs
        if out is not None:
            write_report(rep, sub("reports", phase))
            write_predictions(sub("reports", f"{phase}_predictions.csv"), preds)
            write_epoch_logs(sub("logs", f"{phase}.csv"), logs)
            emit_curves(logs, sub("reports", f"{phase}_curves"))
        log.info("%s accuracy %.4f", phase, rep.accuracy)

    # (2) Phase A: direct classification
    phase = PHASES[0]
    model_a = build_resnet(resnet_cfg, seed=seed, dtype=dtype)
    report.initial_hashes[phase] = model_a.param_hash()
    res_a = train_classifier(model_a, train_n, val_n, replace_seed(train_cfg, seed),
                             out_dir=sub("checkpoints", phase), prefix="classifier",
                             extra_tensors=norm_tensors(train_n.norm_stats))
    report.checkpoints[phase] = res_a.checkpoints
    finish(phase, classifier_predictions(model_a, test_n), res_a.logs)

    # (3) Phase B: autoencoder on the raw training images, reconstruct every split
    phase = PHASES[1]
    dae = build_dae(dae_cfg, seed=seed + DAE_SEED_OFFSET, dtype=dtype)
    report.initial_hashes[phase] = dae.param_hash()
    res_b = train_dae(dae, train_raw, replace_seed(dae_train_cfg, seed + DAE_SEED_OFFSET), val=val_raw,
                      out_dir=sub("checkpoints", phase), prefix="dae")
    report.checkpoints[phase] = res_b.checkpoints
    train_rec = reconstruct_dataset(dae, train_raw)
    val_rec = reconstruct_dataset(dae, val_raw) if val_raw is not None else None
    test_rec = reconstruct_dataset(dae, test_raw)
    report.sizes.update({"train_reconstructed": len(train_rec), "test_reconstructed": len(test_rec)})
    finish(phase, latent_centroid_predictions(dae, train_raw, test_raw), res_b.logs)

    # (4) Phase C: fresh classifier on the reconstructed data
    phase = PHASES[2]
    fit_raw = train_rec
    if hybrid_cfg.phase_c_mode == "union":
        fit_raw = Dataset(train_raw.samples + tuple(
            type(s)(f"{s.id}#rec", s.image, s.label) for s in train_rec.samples), raw.class_names, "reconstructed")
    fit_n = normalize(fit_raw)
    stats_c = fit_n.norm_stats
    if hybrid_cfg.phase_c_eval == "reconstructed":
        val_c = normalize(val_rec, stats_c) if val_rec is not None else None
        test_c = normalize(test_rec, stats_c)
    else:
        val_c = normalize(val_raw, stats_c) if val_raw is not None else None
        test_c = normalize(test_raw, stats_c)
    model_c = build_resnet(resnet_cfg, seed=seed + PHASE_C_SEED_OFFSET, dtype=dtype)
    report.initial_hashes[phase] = model_c.param_hash()
    res_c = train_classifier(model_c, fit_n, val_c, replace_seed(train_cfg, seed + PHASE_C_SEED_OFFSET),
                             out_dir=sub("checkpoints", phase), prefix="classifier",
                             extra_tensors=norm_tensors(stats_c))
    report.checkpoints[phase] = res_c.checkpoints
    preds_c = classifier_predictions(model_c, test_c)
    finish(phase, preds_c, res_c.logs)

    if out is not None:
        (out / "reports" / "comparison.txt").write_text(
            comparison_table([report.reports[p] for p in PHASES], PHASES), encoding="utf-8")
        if hybrid_cfg.gallery_n:
            n = min(hybrid_cfg.gallery_n, len(test_c))
            prediction_gallery(test_c, preds_c.predicted, n, out / "reports" / "gallery.svg", seed=seed)
    return report


def replace_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Training streams follow the run seed so one ``--seed`` controls everything."""
    from dataclasses import replace

    return replace(cfg, seed=seed)
