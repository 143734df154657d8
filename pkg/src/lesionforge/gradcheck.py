"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import ContractError
from .layers import Layer
from .models import ModelGraph
from .tensor import GradientTape, Parameter, Tensor

REL_FLOOR = 1e-12


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), REL_FLOOR)


def _coords(shape, max_coords, rng):
    """All coordinates, or a seeded random order to be consumed until ``max_coords`` are accepted."""
    total = int(np.prod(shape)) if shape else 1
    flat = np.arange(total) if max_coords is None or total <= max_coords else rng.permutation(total)
    return [np.unravel_index(i, shape) if shape else () for i in flat]


@dataclass
class GradCheckResult:
    errors: dict[str, float]  # max relative error per checked tensor
    probed: dict[str, int]  # coordinates compared
    skipped: dict[str, int]  # coordinates whose +-epsilon probe changed ReLU/max-pool piece

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check_run(target: ModelGraph | Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
                   epsilon: float = 1e-4, *, train: bool = True, max_coords: int | None = None,
                   seed: int = 0, check_inputs: bool = True, skip_crossings: bool = False) -> GradCheckResult:
    """Compare tape gradients with central differences for every checked tensor.

    ``target`` is a float64 :class:`ModelGraph` or :class:`Layer` (its parameters
    are checked) or a plain callable over ``inputs``. Non-scalar outputs are reduced with a fixed random
    projection so every output element contributes. ``max_coords`` limits the
    finite-difference probes to a seeded random subset per tensor.

    With ``skip_crossings`` a probe whose perturbed forward passes land on a
    different ReLU/max-pool piece than the base pass is skipped (the function is
    not differentiable across that step) and another coordinate is drawn.
    """
    if epsilon <= 0:
        raise ContractError(f"epsilon must be > 0, got {epsilon}")
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    inputs = [Tensor(x.data, dtype=np.float64) for x in inputs]
    if isinstance(target, Layer):
        target = ModelGraph("layer", None, [target])
    is_graph = isinstance(target, ModelGraph)
    params: list[Parameter] = []
    if is_graph:
        if target.dtype != np.float64:
            raise ContractError("grad_check needs a model built in float64")
        params = list(target.parameters().values())
        saved_buffers = {k: v.copy() for k, v in target.buffers().items()}

    def run(xs):
        if is_graph:
            return target.forward(*xs, train=train)
        return target(*xs)

    # separate stream so the projection never coincides with caller-drawn inputs
    rng = np.random.default_rng([seed, 0x5EED])
    probe = run(inputs)
    projection = None if probe.shape == () else Tensor(rng.standard_normal(probe.shape))

    def loss_of(xs):
        out = run(xs)
        return out if projection is None else ops.sum(ops.mul(out, projection))

    with GradientTape() as tape:
        watched = [tape.watch(x, name=f"input{i}") for i, x in enumerate(inputs)]
        loss = loss_of(watched)
    checked: list[tuple[str, Tensor]] = [(p.name, p) for p in params]
    if check_inputs:
        checked += [(f"input{i}", w) for i, w in enumerate(watched)]
    analytic = tape.gradient(loss, [t for _, t in checked])

    base_piece = None
    if skip_crossings:
        with ops.KinkMonitor() as base_piece:
            loss_of(inputs)
    result = GradCheckResult({}, {}, {})
    try:
        for (name, t), grad in zip(checked, analytic):
            worst, probed, skipped = 0.0, 0, 0
            for idx in _coords(t.shape, max_coords, rng):
                if max_coords is not None and probed >= max_coords:
                    break
                numeric = _central_difference(t, idx, epsilon, inputs, watched, loss_of, base_piece)
                if numeric is None:
                    skipped += 1
                    continue
                err = float(relative_error(grad.data[idx], np.float64(numeric)))
                worst = max(worst, err)
                probed += 1
            # a tensor with no usable probe has not been verified
            result.errors[name] = worst if probed else np.inf
            result.probed[name], result.skipped[name] = probed, skipped
    finally:
        if is_graph:
            for k, v in saved_buffers.items():
                target.set_buffer(k, v)
    return result


def grad_check_detail(target, inputs, epsilon: float = 1e-4, **kwargs) -> dict[str, float]:
    """Max relative error per checked tensor (parameters by name, inputs as ``input<i>``)."""
    return grad_check_run(target, inputs, epsilon, **kwargs).errors


def _central_difference(t: Tensor, idx, eps, inputs, watched, loss_of, base_piece=None) -> float | None:
    base = t.data

    def run(delta):
        arr = base.copy()
        arr[idx] += delta
        if isinstance(t, Parameter):
            t.assign(arr)
            try:
                return float(loss_of(inputs).data)
            finally:
                t.assign(base)
        pos = next(i for i, w in enumerate(watched) if w is t)
        xs = list(inputs)
        xs[pos] = Tensor(arr)
        return float(loss_of(xs).data)

    def evaluate(delta):
        if base_piece is None:
            return run(delta), True
        with ops.KinkMonitor() as mon:
            value = run(delta)
        return value, mon.same_piece(base_piece)

    (plus, ok_plus), (minus, ok_minus) = evaluate(eps), evaluate(-eps)
    if not (ok_plus and ok_minus):
        return None
    return (plus - minus) / (2 * eps)


def kink_margin(target, inputs: Sequence[Tensor], train: bool = True) -> float:
    """Smallest ReLU-input magnitude / max-pool winner gap seen in one forward pass."""
    if isinstance(target, Layer):
        target = ModelGraph("layer", None, [target])
    saved = {k: v.copy() for k, v in target.buffers().items()} if isinstance(target, ModelGraph) else {}
    with ops.KinkMonitor() as mon:
        if isinstance(target, ModelGraph):
            target.forward(*inputs, train=train)
        else:
            target(*inputs)
    for k, v in saved.items():
        target.set_buffer(k, v)
    return mon.margin


def sample_away_from_kinks(target, draw: Callable[[np.random.Generator], Sequence[Tensor]],
                           epsilon: float, seed: int, *, factor: float = 10.0, max_tries: int = 200,
                           train: bool = True) -> list[Tensor]:
    """Draw inputs with ``draw(rng)`` until every kink margin exceeds ``factor * epsilon``."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        xs = list(draw(rng))
        if kink_margin(target, xs, train) > factor * epsilon:
            return xs
    raise ContractError(f"no input draw cleared the kink margin {factor * epsilon} in {max_tries} tries")


def randomize_affine(graph: ModelGraph, seed: int) -> ModelGraph:
    """Give every bias and BN scale/shift a generic nonzero value (in place).

    Fresh models have zero biases, which puts dead-ReLU outputs exactly on the
    next ReLU's kink; checking gradients there is meaningless.
    """
    rng = np.random.default_rng([seed, 0xB1A5])
    for name, p in graph.parameters().items():
        if name.endswith((".bias", ".beta")):
            p.assign(rng.uniform(-0.5, 0.5, p.shape))
        elif name.endswith(".gamma"):
            p.assign(rng.uniform(0.5, 1.5, p.shape))
    return graph


def grad_check(target, inputs, epsilon: float = 1e-4, **kwargs) -> float:
    """Max over all checked tensors of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``."""
    return grad_check_run(target, inputs, epsilon, **kwargs).worst
