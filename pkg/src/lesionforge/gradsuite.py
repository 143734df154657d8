"""Seeded gradient-check battery over every primitive and both model families."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import GradCheckResult, grad_check, grad_check_run, randomize_affine, sample_away_from_kinks
from .layers import BatchNorm2d, Dense, ReLU
from .models import DAEConfig, ModelGraph, ResNetConfig, build_dae, build_resnet
from .tensor import Tensor

EPSILON = 1e-4
TOLERANCE = 1e-4

GRADCHECK_RESNET = ResNetConfig.preset("tiny")
GRADCHECK_DAE = DAEConfig()
MODEL_COORDS = 4  # finite-difference probes per parameter tensor


def _t(rng, *shape, low=None, high=None):
    if low is None:
        return Tensor(rng.standard_normal(shape), dtype=np.float64)
    return Tensor(rng.uniform(low, high, shape), dtype=np.float64)


def _kink_free(fn, draw, seed):
    return sample_away_from_kinks(fn, draw, EPSILON, seed)


def check_conv_strided(seed):
    r = np.random.default_rng(seed)

    def fn(x, k, b):
        return ops.conv2d(x, k, b, stride=2, padding=1)

    return grad_check(fn, [_t(r, 2, 3, 6, 6), _t(r, 4, 3, 3, 3), _t(r, 4)], EPSILON, seed=seed)


def check_conv_valid(seed):
    r = np.random.default_rng(seed)

    def fn(x, k):
        return ops.conv2d(x, k, None, stride=1, padding=0)

    return grad_check(fn, [_t(r, 1, 2, 5, 4), _t(r, 3, 2, 2, 3)], EPSILON, seed=seed)


def check_dense(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.dense, [_t(r, 3, 5), _t(r, 4, 5), _t(r, 4)], EPSILON, seed=seed)


def check_relu(seed):
    xs = _kink_free(ops.relu, lambda r: [_t(r, 2, 3, 4, 4)], seed)
    return grad_check(ops.relu, xs, EPSILON, seed=seed)


def check_sigmoid(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.sigmoid, [_t(r, 3, 6) * Tensor(3.0, dtype=np.float64)], EPSILON, seed=seed)


def check_softmax(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.softmax, [_t(r, 4, 7)], EPSILON, seed=seed)


def check_max_pool(seed):
    def fn(x):
        return ops.max_pool2d(x, 3, 2, 1)

    xs = _kink_free(fn, lambda r: [_t(r, 2, 2, 7, 7)], seed)
    return grad_check(fn, xs, EPSILON, seed=seed)


def check_global_avg_pool(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.global_avg_pool, [_t(r, 2, 3, 4, 5)], EPSILON, seed=seed)


def check_upsample(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.upsample_nearest, [_t(r, 2, 3, 3, 4)], EPSILON, seed=seed)


def check_batch_norm_train(seed):
    r = np.random.default_rng(seed)

    def fn(x, g, b):
        return ops.batch_norm(x, g, b)[0]

    xs = [_t(r, 2, 3, 7, 7), _t(r, 3, low=0.5, high=1.5), _t(r, 3, low=-0.5, high=0.5)]
    return grad_check(fn, xs, EPSILON, seed=seed)


def check_batch_norm_eval(seed):
    r = np.random.default_rng(seed)
    mean, var = r.uniform(-0.5, 0.5, 3), r.uniform(0.5, 2.0, 3)

    def fn(x, g, b):
        return ops.batch_norm(x, g, b, running_mean=mean, running_var=var)

    xs = [_t(r, 2, 3, 4, 4), _t(r, 3, low=0.5, high=1.5), _t(r, 3, low=-0.5, high=0.5)]
    return grad_check(fn, xs, EPSILON, seed=seed)


def check_cross_entropy(seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 7, 5)
    return grad_check(lambda z: ops.softmax_cross_entropy(z, labels), [_t(r, 5, 7)], EPSILON, seed=seed)


def check_recon_loss(seed):
    r = np.random.default_rng(seed)
    return grad_check(ops.squared_error, [_t(r, 2, 3, 4, 4), _t(r, 2, 3, 4, 4)], EPSILON, seed=seed)


def check_elementwise(seed):
    r = np.random.default_rng(seed)

    def fn(a, b, c):
        return ops.sub(ops.mul(ops.add(a, b), c), ops.scale(a, 0.5))

    return grad_check(fn, [_t(r, 3, 4), _t(r, 4), _t(r, 3, 1)], EPSILON, seed=seed)


def check_bn_relu_dense(seed):
    """Train-mode batch norm inside a stack, large enough that BN statistics are well conditioned."""
    bn = BatchNorm2d("bn", 3, dtype=np.float64)
    head = Dense("fc", 3 * 5 * 5, 4, dtype=np.float64)
    graph = ModelGraph("layer", None, [bn, ReLU("relu"), head])
    r = np.random.default_rng([seed, 1])
    head.weight.assign(r.standard_normal(head.weight.shape) * 0.2)
    randomize_affine(graph, seed)
    xs = sample_away_from_kinks(graph, lambda rr: [_t(rr, 4, 3, 5, 5)], EPSILON, seed)
    return grad_check(graph, xs, EPSILON, train=True, seed=seed)


def _randomize_running_stats(graph: ModelGraph, seed: int) -> None:
    r = np.random.default_rng([seed, 0x57A7])
    for key, value in graph.buffers().items():
        if key.endswith("running_mean"):
            graph.set_buffer(key, r.uniform(-0.5, 0.5, value.shape))
        elif key.endswith("running_var"):
            graph.set_buffer(key, r.uniform(0.5, 2.0, value.shape))


def check_resnet(seed) -> GradCheckResult:
    """Full bottleneck network in inference mode (BN as a fixed affine map), sampled coordinates."""
    graph = build_resnet(GRADCHECK_RESNET, seed=seed, dtype=np.float64)
    randomize_affine(graph, seed)
    _randomize_running_stats(graph, seed)
    h, w, c = GRADCHECK_RESNET.input_size
    x = _t(np.random.default_rng(seed), 1, c, h, w)
    return grad_check_run(graph, [x], EPSILON, train=False, max_coords=MODEL_COORDS, seed=seed,
                          skip_crossings=True)


def check_dae(seed) -> GradCheckResult:
    graph = build_dae(GRADCHECK_DAE, seed=seed, dtype=np.float64)
    randomize_affine(graph, seed)
    h, w, c = GRADCHECK_DAE.input_size
    x = _t(np.random.default_rng(seed), 2, c, h, w, low=0.0, high=1.0)
    return grad_check_run(graph, [x], EPSILON, train=True, max_coords=MODEL_COORDS, seed=seed,
                          skip_crossings=True)


CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d_stride2_pad1": check_conv_strided,
    "conv2d_valid": check_conv_valid,
    "dense": check_dense,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "max_pool2d": check_max_pool,
    "global_avg_pool": check_global_avg_pool,
    "upsample_nearest": check_upsample,
    "batch_norm_train": check_batch_norm_train,
    "batch_norm_eval": check_batch_norm_eval,
    "softmax_cross_entropy": check_cross_entropy,
    "recon_loss": check_recon_loss,
    "elementwise": check_elementwise,
    "bn_relu_dense_train": check_bn_relu_dense,
    "resnet_model": check_resnet,
    "dae_model": check_dae,
}


@dataclass
class SuiteResult:
    worst: dict[str, float]
    trials: int
    seconds: float
    skipped: dict[str, int]  # probes dropped for crossing a ReLU/max-pool boundary

    @property
    def passed(self) -> bool:
        return all(v < TOLERANCE for v in self.worst.values())


def run_suite(seed: int = 0, trials: int = 20, only: list[str] | None = None) -> SuiteResult:
    """Worst relative error per check over ``trials`` seeded trials (trial seeds ``seed + t``)."""
    names = only or list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown checks {sorted(unknown)}")
    t0 = time.perf_counter()
    worst = {name: 0.0 for name in names}
    skipped = {name: 0 for name in names}
    for t in range(trials):
        for name in names:
            out = CHECKS[name](seed + t)
            if isinstance(out, GradCheckResult):
                skipped[name] += sum(out.skipped.values())
                out = out.worst
            worst[name] = max(worst[name], out)
    return SuiteResult(worst, trials, time.perf_counter() - t0, skipped)
