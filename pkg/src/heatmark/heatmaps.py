"""Conversions between heatmaps, pixel coordinates and distribution params.

Conventions: a heatmap stack is ``[..., K, H, W]`` (optional leading batch
axes), landmark points are ``[..., K, 2]`` in ``(x, y)`` pixel units with
the origin at the top-left, x rightward, y downward.  All operations here
are differentiable through the engine unless noted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from heatmark.engine import ops
from heatmark.engine.tensor import Tensor
from heatmark.errors import ConfigError, ContractError, NumericError

# Lower bound on estimated scales; keeps log(scale) terms finite for
# point-mass heatmaps.
SCALE_FLOOR = 1e-4

LAPLACE = "laplace"
GAUSSIAN = "gaussian"


@dataclass
class SoftargmaxConfig:
    """Temperature of the spatial softmax."""

    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"softargmax beta must be positive, got {self.beta}")


@dataclass
class HeatmapStack:
    """K per-landmark maps; ``normalized`` marks probability-mass maps."""

    maps: Tensor
    normalized: bool = False

    def __post_init__(self):
        if not isinstance(self.maps, Tensor):
            self.maps = Tensor(self.maps)
        if self.maps.ndim < 3:
            raise ContractError(f"heatmap stack needs [..., K, H, W], got {self.maps.shape}")
        k, h, w = self.maps.shape[-3:]
        if k < 1 or h < 1 or w < 1:
            raise ContractError(f"empty heatmap stack {self.maps.shape}")
        if self.normalized:
            data = self.maps.data
            if data.size and (np.min(data) < -1e-6 or np.max(np.abs(data.sum(axis=(-2, -1)) - 1.0)) > 1e-5):
                raise ContractError("stack flagged normalized but maps are not probability masses")

    @property
    def landmark_count(self) -> int:
        return self.maps.shape[-3]

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.maps.shape[-2], self.maps.shape[-1]


@dataclass
class LandmarkSet:
    """K points in pixel coordinates plus per-landmark visibility."""

    points: Union[Tensor, np.ndarray]
    visible: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = self.points.shape
        if len(shape) < 2 or shape[-1] != 2:
            raise ContractError(f"landmark points need [..., K, 2], got {shape}")
        if self.visible is None:
            self.visible = np.ones(shape[:-1], dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool)
            if self.visible.shape != shape[:-1]:
                raise ContractError(
                    f"visibility shape {self.visible.shape} != point shape {shape[:-1]}"
                )

    @property
    def landmark_count(self) -> int:
        return self.points.shape[-2]

    def as_array(self) -> np.ndarray:
        return self.points.data if isinstance(self.points, Tensor) else np.asarray(self.points)

    def as_tensor(self) -> Tensor:
        return self.points if isinstance(self.points, Tensor) else Tensor(self.points)


@dataclass
class DistributionParams:
    """Per-landmark, per-axis location and scale of a fitted distribution."""

    family: str
    mu: Tensor
    scale: Tensor

    def __post_init__(self):
        if self.family not in (LAPLACE, GAUSSIAN):
            raise ConfigError(f"unknown distribution family {self.family!r}")


_GRIDS: dict[tuple[int, int, str], tuple[np.ndarray, np.ndarray]] = {}


def coordinate_grids(h: int, w: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(x_grid, y_grid), each [H, W], holding column / row indices."""
    key = (h, w, np.dtype(dtype).name)
    if key not in _GRIDS:
        ys, xs = np.mgrid[0:h, 0:w]
        _GRIDS[key] = (xs.astype(dtype), ys.astype(dtype))
    return _GRIDS[key]


def normalize(raw: HeatmapStack, cfg: Optional[SoftargmaxConfig] = None) -> HeatmapStack:
    """Per-map spatial softmax of ``beta * raw``."""
    cfg = cfg or SoftargmaxConfig()
    out = ops.spatial_softmax(raw.maps, beta=cfg.beta)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("normalize produced non-finite values")
    return HeatmapStack(out, normalized=True)


def softargmax2d(h: HeatmapStack, cfg: Optional[SoftargmaxConfig] = None) -> LandmarkSet:
    """Expected pixel coordinate under each map.

    ``cfg`` is accepted for interface symmetry; the temperature acts in
    :func:`normalize`, whose output this function expects.
    """
    del cfg
    if not h.normalized:
        raise ContractError("softargmax2d expects a normalized heatmap stack")
    hh, ww = h.grid_size
    xg, yg = coordinate_grids(hh, ww, h.maps.dtype)
    px = ops.sum_(ops.mul(h.maps, Tensor(xg)), axis=(-2, -1))
    py = ops.sum_(ops.mul(h.maps, Tensor(yg)), axis=(-2, -1))
    return LandmarkSet(ops.stack([px, py], axis=-1))


def estimate_scale(h: HeatmapStack, mu: LandmarkSet, family: str) -> DistributionParams:
    """Per-axis spread of each map around ``mu``.

    Laplace: mean absolute deviation per axis; Gaussian: per-axis standard
    deviation (sqrt of variance).  ``mu`` must be the softargmax of the
    same maps for the result to parameterize the fitted distribution.
    Scales are floored at ``SCALE_FLOOR`` so downstream log terms stay
    finite on point-mass maps.
    """
    if family not in (LAPLACE, GAUSSIAN):
        raise ConfigError(f"unknown distribution family {family!r}")
    if not h.normalized:
        raise ContractError("estimate_scale expects a normalized heatmap stack")
    hh, ww = h.grid_size
    xg, yg = coordinate_grids(hh, ww, h.maps.dtype)
    pts = mu.as_tensor()
    lead = pts.shape[:-1]  # [..., K]

    def axis_scale(grid: np.ndarray, axis_idx: int) -> Tensor:
        center = ops.reshape(ops.take(pts, [axis_idx], axis=-1), lead + (1, 1))
        diff = ops.sub(Tensor(grid), center)
        if family == LAPLACE:
            dev = ops.sum_(ops.mul(h.maps, ops.abs_(diff)), axis=(-2, -1))
            return ops.clip_min(dev, SCALE_FLOOR)
        var = ops.sum_(ops.mul(h.maps, ops.square(diff)), axis=(-2, -1))
        return ops.sqrt(ops.clip_min(var, SCALE_FLOOR * SCALE_FLOOR))

    sx = axis_scale(xg, 0)
    sy = axis_scale(yg, 1)
    return DistributionParams(family, pts, ops.stack([sx, sy], axis=-1))


def render_target_heatmaps(s: LandmarkSet, height: int, width: int) -> HeatmapStack:
    """Grid-discretized unit-scale Laplace bumps at the given landmarks.

    Values are proportional to exp(-(|x - x_k| + |y - y_k|)) evaluated at
    integer pixel centers (no snapping of sub-pixel landmarks) and
    renormalized to sum to one.  The result is a constant: no gradients
    flow into it.
    """
    if s.landmark_count < 1:
        raise ContractError("render_target_heatmaps requires at least one landmark")
    pts = s.as_array().astype(np.float32)
    lo = np.zeros(2, dtype=np.float32)
    hi = np.array([width - 1, height - 1], dtype=np.float32)
    clamped = np.clip(pts, lo, hi)
    if np.any(clamped != pts):
        warnings.warn("landmarks outside the grid were clamped to its boundary", stacklevel=2)
    xs = np.arange(width, dtype=np.float32)
    ys = np.arange(height, dtype=np.float32)
    # separable: [..., K, H, 1] * [..., K, 1, W]
    wx = np.exp(-np.abs(xs - clamped[..., 0:1]))
    wy = np.exp(-np.abs(ys - clamped[..., 1:2]))
    maps = wy[..., :, None] * wx[..., None, :]
    maps /= maps.sum(axis=(-2, -1), keepdims=True)
    return HeatmapStack(Tensor(maps), normalized=True)


def decode_argmax(h: HeatmapStack) -> LandmarkSet:
    """Coordinates of each map's maximum; ties break to the smallest row,
    then the smallest column.  Not differentiable."""
    data = h.maps.data
    hh, ww = data.shape[-2:]
    flat = data.reshape(data.shape[:-2] + (hh * ww,))
    idx = flat.argmax(axis=-1)
    ys, xs = np.divmod(idx, ww)
    pts = np.stack([xs, ys], axis=-1).astype(data.dtype)
    return LandmarkSet(pts)


# -- portable image export (for the CLI render command) ---------------------


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from a [H, W] array scaled by its own maximum."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"PGM export needs a 2-d array, got {img.shape}")
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else img / peak
    data = (np.clip(scaled, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from a [3, H, W] array of values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"PPM export needs [3, H, W], got {img.shape}")
    data = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())
