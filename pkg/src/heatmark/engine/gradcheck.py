"""Finite-difference verification of analytic gradients.

The checker compares reverse-mode gradients against central differences.
It requires 64-bit inputs (32-bit differences are too noisy to certify a
1e-6 bound) and a deterministic function: stochastic primitives must run
in eval mode.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from heatmark.engine import ops
from heatmark.engine.tensor import Graph, Tensor, backward
from heatmark.errors import ContractError


def gradient_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and numeric gradients at ``point``.

    Error metric per coordinate: |analytic - central| / max(1, |analytic|).
    """
    if point.dtype != np.float64:
        raise ContractError("gradient_check requires a 64-bit point")

    def run(data: np.ndarray) -> float:
        out = fn(Tensor(data))
        if out.size != 1:
            raise ContractError("gradient_check requires a scalar-valued function")
        return float(out.data)

    base = run(point.data)
    if run(point.data) != base:
        raise ContractError("gradient_check requires a deterministic function (use eval mode)")

    x = Tensor(point.data.copy(), requires_grad=True)
    with Graph() as g:
        loss = fn(x)
    backward(loss, g)
    analytic = np.zeros_like(point.data) if x.grad is None else x.grad

    flat = point.data.reshape(-1).copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = run(flat.reshape(point.shape))
        flat[i] = orig - epsilon
        f_minus = run(flat.reshape(point.shape))
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(a))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection so the check exercises the full Jacobian action
    return ops.sum_(ops.mul(out, Tensor(w)))


def primitive_check_cases(full: bool = False, seed: int = 0):
    """Yield (name, fn, point) finite-difference cases covering every primitive."""
    rng = np.random.default_rng(seed)
    shp = (3, 4)

    def elementwise(name, make, x=None, positive=False):
        data = np.abs(_rand(rng, *shp)) + 0.5 if positive else _rand(rng, *shp)
        if x is not None:
            data = x
        out_shape = make(Tensor(data, dtype=np.float64)).shape
        w = _rand(rng, *out_shape)
        return name, (lambda t, mk=make, ww=w: _weighted(mk(t), ww)), Tensor(data, dtype=np.float64)

    other = Tensor(_rand(rng, *shp) + 2.0, dtype=np.float64)
    bcast = Tensor(_rand(rng, shp[1]) + 2.0, dtype=np.float64)
    yield elementwise("add", lambda t: ops.add(t, other))
    yield elementwise("add_broadcast", lambda t: ops.add(t, bcast))
    yield elementwise("sub", lambda t: ops.sub(t, other))
    yield elementwise("mul", lambda t: ops.mul(t, other))
    yield elementwise("div", lambda t: ops.div(t, other))
    yield elementwise("div_denominator", lambda t: ops.div(other, t), positive=True)
    yield elementwise("neg", ops.neg)
    yield elementwise("exp", ops.exp)
    yield elementwise("log", ops.log, positive=True)
    # keep points away from the |.| and leaky-relu kinks
    kinked = _rand(rng, *shp)
    kinked = np.where(np.abs(kinked) < 0.05, 0.5, kinked)
    yield elementwise("abs", ops.abs_, x=kinked)
    yield elementwise("leaky_relu", lambda t: ops.leaky_relu(t, 0.2), x=kinked)
    yield elementwise("sqrt", ops.sqrt, positive=True)
    yield elementwise("square", ops.square)
    yield elementwise("sigmoid", ops.sigmoid)
    clipped = _rand(rng, *shp)
    clipped = np.where(np.abs(clipped - 0.1) < 0.05, 0.7, clipped)
    yield elementwise("clip_min", lambda t: ops.clip_min(t, 0.1), x=clipped)
    yield elementwise("sum", lambda t: ops.sum_(t))
    yield elementwise("sum_axis", lambda t: ops.sum_(t, axis=1))
    yield elementwise("mean", lambda t: ops.mean(t, axis=(0,), keepdims=True))
    yield elementwise("reshape", lambda t: ops.reshape(t, (shp[0] * shp[1],)))
    yield elementwise("transpose", lambda t: ops.transpose(t, (1, 0)))
    yield elementwise("concat", lambda t: ops.concat([t, other], axis=0))
    yield elementwise("stack", lambda t: ops.stack([t, other], axis=1))
    yield elementwise("take", lambda t: ops.take(t, [0, 2, 2], axis=0))
    yield elementwise("spatial_softmax", lambda t: ops.spatial_softmax(t, beta=3.0))

    # spatial primitives on small NHWC tensors
    x4 = _rand(rng, 2, 6, 6, 3)
    w4 = _rand(rng, 3, 3, 3, 2) * 0.5
    b4 = _rand(rng, 2)
    wproj = _rand(rng, 2, 6, 6, 2)
    wt, bt = Tensor(w4), Tensor(b4)
    yield (
        "conv2d_input",
        lambda t: _weighted(ops.conv2d(t, wt, bt, stride=1, padding=1), wproj),
        Tensor(x4, dtype=np.float64),
    )
    xt = Tensor(x4)
    yield (
        "conv2d_weight",
        lambda t: _weighted(ops.conv2d(xt, t, bt, stride=1, padding=1), wproj),
        Tensor(w4, dtype=np.float64),
    )
    wproj_s2 = _rand(rng, 2, 3, 3, 2)
    yield (
        "conv2d_stride2",
        lambda t: _weighted(ops.conv2d(t, wt, bt, stride=2, padding=1), wproj_s2),
        Tensor(_rand(rng, 2, 6, 6, 3), dtype=np.float64),
    )
    # fat-channel case exercises the im2col code path
    wf = Tensor(_rand(rng, 3, 3, 64, 2) * 0.1)
    wproj_f = _rand(rng, 1, 4, 4, 2)
    yield (
        "conv2d_im2col",
        lambda t: _weighted(ops.conv2d(t, wf, stride=1, padding=1), wproj_f),
        Tensor(_rand(rng, 1, 4, 4, 64), dtype=np.float64),
    )

    pool_in = _rand(rng, 2, 4, 4, 2)
    # perturb away from in-window ties so the subgradient is unambiguous
    pool_in += np.arange(pool_in.size).reshape(pool_in.shape) * 1e-3
    wproj_p = _rand(rng, 2, 2, 2, 2)
    yield (
        "max_pool2d",
        lambda t: _weighted(ops.max_pool2d(t, stride=2), wproj_p),
        Tensor(pool_in, dtype=np.float64),
    )
    wproj_u = _rand(rng, 2, 8, 8, 2)
    yield (
        "upsample_bilinear2x",
        lambda t: _weighted(ops.upsample_bilinear2x(t), wproj_u),
        Tensor(_rand(rng, 2, 4, 4, 2), dtype=np.float64),
    )

    gamma = Tensor(_rand(rng, 3) * 0.5 + 1.0)
    betap = Tensor(_rand(rng, 3))
    state = ops.BatchNormState(3, dtype=np.float64)
    wproj_bn = _rand(rng, 2, 4, 4, 3)
    yield (
        "batch_norm_train",
        lambda t: _weighted(
            ops.batch_norm(t, gamma, betap, ops.BatchNormState(3, np.float64), ops.TRAIN), wproj_bn
        ),
        Tensor(_rand(rng, 2, 4, 4, 3), dtype=np.float64),
    )
    state.mean[:] = _rand(rng, 3) * 0.1
    state.var[:] = np.abs(_rand(rng, 3)) + 0.5
    yield (
        "batch_norm_eval",
        lambda t: _weighted(ops.batch_norm(t, gamma, betap, state, ops.EVAL), wproj_bn),
        Tensor(_rand(rng, 2, 4, 4, 3), dtype=np.float64),
    )
    # eval-mode dropout/noise are identities; check they pass gradients through
    yield elementwise("dropout_eval", lambda t: ops.dropout(t, 0.5, ops.EVAL))
    yield elementwise("gaussian_noise_eval", lambda t: ops.gaussian_noise(t, 0.2, ops.EVAL))

    if full:
        deep = _rand(rng, 1, 8, 8, 4)
        wd1 = Tensor(_rand(rng, 3, 3, 4, 4) * 0.4)
        wd2 = Tensor(_rand(rng, 3, 3, 4, 4) * 0.4)

        def pipeline(t):
            h = ops.leaky_relu(ops.conv2d(t, wd1, stride=1, padding=1), 0.2)
            h = ops.max_pool2d(h)
            h = ops.upsample_bilinear2x(h)
            h = ops.conv2d(h, wd2, stride=1, padding=1)
            return ops.mean(ops.square(h))

        yield "pipeline_conv_pool_up", pipeline, Tensor(deep, dtype=np.float64)


def run_primitive_checks(full: bool = False, seed: int = 0) -> dict[str, float]:
    """Finite-difference error per primitive; used by tests and the CLI."""
    return {
        name: gradient_check(fn, point)
        for name, fn, point in primitive_check_cases(full=full, seed=seed)
    }
