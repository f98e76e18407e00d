"""Training objectives: coordinate distance, closed-form KL, adversarial.

All losses reduce with means (over visible landmarks, axes, patch scores)
so their magnitudes are comparable across landmark counts and map sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from heatmark.engine import ops
from heatmark.engine.tensor import Tensor
from heatmark.errors import ContractError
from heatmark.heatmaps import (
    GAUSSIAN,
    LAPLACE,
    DistributionParams,
    HeatmapStack,
    LandmarkSet,
    SoftargmaxConfig,
    estimate_scale,
    normalize,
    softargmax2d,
)

SOFTARGMAX = "softargmax"
LAPLACE_KL = "laplace_kl"
GAUSSIAN_KL = "gaussian_kl"
LOSS_KINDS = (SOFTARGMAX, LAPLACE_KL, GAUSSIAN_KL)

# scores are clamped into [eps, 1-eps] before any log
_SCORE_EPS = 1e-7


@dataclass
class LossValue:
    """A scalar objective plus its named components (as floats)."""

    scalar: Tensor
    breakdown: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.scalar.item()


def _visible_rows(points: Tensor, visible: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Flatten [..., K, 2] to [N, 2] and keep visible rows only."""
    flat = ops.reshape(points, (-1, 2))
    mask = np.asarray(visible, dtype=bool).reshape(-1)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise ContractError("no visible landmarks to score")
    return ops.take(flat, idx, axis=0), idx


def l2_coordinate_loss(pred: LandmarkSet, truth: LandmarkSet) -> LossValue:
    """Mean Euclidean distance over visible landmarks."""
    if pred.landmark_count != truth.landmark_count:
        raise ContractError(
            f"landmark counts differ: {pred.landmark_count} vs {truth.landmark_count}"
        )
    sel_pred, idx = _visible_rows(pred.as_tensor(), truth.visible)
    sel_truth = Tensor(truth.as_array().reshape(-1, 2)[idx])
    d2 = ops.sum_(ops.square(ops.sub(sel_pred, sel_truth)), axis=1)
    dist = ops.sqrt(d2)
    loss = ops.mean(dist)
    return LossValue(loss, {"supervised": loss.item()})


def softargmax_loss(
    raw: HeatmapStack, truth: LandmarkSet, cfg: Optional[SoftargmaxConfig] = None
) -> LossValue:
    """Coordinate loss on the expectation decode of the (normalized) maps.

    Raw stacks are passed through :func:`normalize` first; stacks already
    flagged normalized are used as-is.
    """
    h = raw if raw.normalized else normalize(raw, cfg)
    return l2_coordinate_loss(softargmax2d(h), truth)


def kl_divergence(q: DistributionParams, p_mu: LandmarkSet) -> LossValue:
    """Closed-form KL from the fitted per-axis distribution to a unit-scale
    target centered on the true landmarks.

    Per axis, with displacement d = mu_hat - mu:
      Laplace(mu_hat, b) || Laplace(mu, 1):   -ln b + |d| + b*exp(-|d|/b) - 1
      Gaussian(mu_hat, s) || Gaussian(mu, 1): -ln s + (s^2 + d^2)/2 - 1/2
    Reduced as the mean over visible landmarks and both axes.
    """
    if float(np.min(q.scale.data)) <= 0.0:
        raise ContractError("kl_divergence requires strictly positive scales")
    if q.mu.shape[-2] != p_mu.landmark_count:
        raise ContractError(
            f"landmark counts differ: {q.mu.shape[-2]} vs {p_mu.landmark_count}"
        )
    mu_sel, idx = _visible_rows(q.mu, p_mu.visible)
    scale_flat = ops.reshape(q.scale, (-1, 2))
    scale_sel = ops.take(scale_flat, idx, axis=0)
    target = Tensor(p_mu.as_array().reshape(-1, 2)[idx])
    delta = ops.abs_(ops.sub(mu_sel, target))
    if q.family == LAPLACE:
        decay = ops.exp(ops.neg(ops.div(delta, scale_sel)))
        per_axis = ops.sub(
            ops.add(ops.add(ops.neg(ops.log(scale_sel)), delta), ops.mul(scale_sel, decay)),
            1.0,
        )
    else:
        var_plus = ops.add(ops.square(scale_sel), ops.square(delta))
        per_axis = ops.sub(
            ops.add(ops.neg(ops.log(scale_sel)), ops.mul(var_plus, 0.5)), 0.5
        )
    loss = ops.mean(per_axis)
    return LossValue(loss, {"supervised": loss.item()})


def supervised_loss(
    raw: HeatmapStack,
    truth: LandmarkSet,
    kind: str,
    cfg: Optional[SoftargmaxConfig] = None,
) -> LossValue:
    """Dispatch on the configured supervised objective."""
    if kind == SOFTARGMAX:
        return softargmax_loss(raw, truth, cfg)
    if kind in (LAPLACE_KL, GAUSSIAN_KL):
        family = LAPLACE if kind == LAPLACE_KL else GAUSSIAN
        h = raw if raw.normalized else normalize(raw, cfg)
        mu = softargmax2d(h)
        params = estimate_scale(h, mu, family)
        return kl_divergence(params, truth)
    raise ContractError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def _clamped_unit(t: Tensor) -> Tensor:
    # clamp into [eps, 1-eps] differentiably from both sides
    low = ops.clip_min(t, _SCORE_EPS)
    return ops.sub(1.0, ops.clip_min(ops.sub(1.0, low), _SCORE_EPS))


def adversarial_losses(
    d_real: Tensor, d_fake: Tensor, saturating: bool = False
) -> tuple[LossValue, LossValue]:
    """Discriminator and generator objectives from patch score maps.

    Scores must be post-sigmoid; they are epsilon-clamped before the logs.
    The generator term defaults to the non-saturating form -E[log D(fake)];
    ``saturating=True`` restores +E[log(1 - D(fake))].
    """
    real = _clamped_unit(d_real)
    fake = _clamped_unit(d_fake)
    d_loss = ops.sub(
        ops.neg(ops.mean(ops.log(real))), ops.mean(ops.log(ops.sub(1.0, fake)))
    )
    if saturating:
        g_adv = ops.mean(ops.log(ops.sub(1.0, fake)))
    else:
        g_adv = ops.neg(ops.mean(ops.log(fake)))
    return (
        LossValue(d_loss, {"discriminator": d_loss.item()}),
        LossValue(g_adv, {"adversarial": g_adv.item()}),
    )


def total_generator_loss(supervised: LossValue, g_adv: LossValue, lam: float) -> LossValue:
    """supervised + lambda * adversarial, with both components recorded."""
    if lam < 0:
        raise ContractError(f"adversarial weight must be >= 0, got {lam}")
    total = ops.add(supervised.scalar, ops.mul(g_adv.scalar, lam))
    return LossValue(
        total,
        {
            "supervised": supervised.item(),
            "adversarial": lam * g_adv.item(),
        },
    )
