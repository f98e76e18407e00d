"""NMSE evaluation, heatmap scatter statistics, and dataset-level reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from heatmark.data import DatasetManifest
from heatmark.engine.optim import ParameterStore
from heatmark.errors import ConfigError, ContractError
from heatmark.heatmaps import (
    LAPLACE,
    HeatmapStack,
    LandmarkSet,
    SoftargmaxConfig,
    estimate_scale,
    normalize,
    softargmax2d,
)
from heatmark.models import GeneratorSpec, generator_forward

INTEROCULAR = "interocular"
BBOX_SQRT = "bbox_sqrt"
DIAGONAL = "diagonal"
NORM_KINDS = (INTEROCULAR, BBOX_SQRT, DIAGONAL)


@dataclass
class NormSpec:
    """Choice of the face-size normalizer in the error metric.

    ``interocular`` uses the distance between two reference landmarks,
    ``bbox_sqrt`` the square root of the ground-truth bounding-box area,
    and ``diagonal`` the image diagonal (the synthetic-data convention).
    """

    kind: str = DIAGONAL
    index_a: int = 0
    index_b: int = 1

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"norm kind must be one of {NORM_KINDS}, got {self.kind!r}")

    def factor(self, truth: LandmarkSet, image_size: Optional[tuple[int, int]] = None) -> float:
        pts = truth.as_array()
        if self.kind == INTEROCULAR:
            k = truth.landmark_count
            if self.index_a >= k or self.index_b >= k:
                raise ConfigError(
                    f"interocular indices ({self.index_a}, {self.index_b}) out of range for K={k}"
                )
            return float(np.linalg.norm(pts[self.index_a] - pts[self.index_b]))
        if self.kind == BBOX_SQRT:
            vis = pts[truth.visible]
            span = vis.max(axis=0) - vis.min(axis=0)
            return float(np.sqrt(span[0] * span[1]))
        if image_size is None:
            raise ContractError("diagonal norm requires the image size")
        h, w = image_size
        return float(np.hypot(h, w))


def nmse(
    pred: LandmarkSet,
    truth: LandmarkSet,
    norm: Union[NormSpec, float],
    image_size: Optional[tuple[int, int]] = None,
) -> float:
    """Normalized mean landmark error: sum_k ||s_k - s~_k|| / (K * d) over
    visible landmarks, with d from ``norm``."""
    d = norm.factor(truth, image_size) if isinstance(norm, NormSpec) else float(norm)
    if not d > 0:
        raise ContractError(f"normalization factor must be positive, got {d}")
    p = pred.as_array()
    t = truth.as_array()
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != truth shape {t.shape}")
    vis = truth.visible
    k = int(vis.sum())
    if k == 0:
        raise ContractError("no visible landmarks")
    dists = np.linalg.norm((p - t)[vis], axis=-1)
    return float(dists.sum() / (k * d))


def scatter_statistic(h: HeatmapStack) -> float:
    """Mean per-axis absolute deviation of the maps about their softargmax;
    the measurable form of prediction confidence (lower = sharper)."""
    if not h.normalized:
        raise ContractError("scatter_statistic expects normalized maps")
    mu = softargmax2d(h)
    params = estimate_scale(h, mu, LAPLACE)
    return float(params.scale.data.mean())


@dataclass
class EvalRecord:
    """Per-sample metrics plus aggregates for one dataset evaluation."""

    nmse_per_sample: np.ndarray
    scatter_per_sample: np.ndarray
    errors: list[np.ndarray] = field(default_factory=list)  # per-sample [K, 2]

    @property
    def mean_nmse(self) -> float:
        return float(self.nmse_per_sample.mean())

    @property
    def mean_scatter(self) -> float:
        return float(self.scatter_per_sample.mean())

    def tsv_lines(self) -> list[str]:
        lines = ["index\tnmse\tscatter"]
        for i, (e, s) in enumerate(zip(self.nmse_per_sample, self.scatter_per_sample)):
            lines.append(f"{i}\t{e:.6f}\t{s:.6f}")
        return lines

    def summary_line(self, method: str, dataset: str) -> str:
        return f"{method}\t{dataset}\t{self.mean_nmse:.6f}\tscatter_per_axis={self.mean_scatter:.6f}"


class Predictor:
    """Eval-mode generator wrapper: images in, landmark coordinates out."""

    def __init__(self, gen: ParameterStore, spec: GeneratorSpec, beta: float = 1.0):
        self.gen = gen
        self.spec = spec
        self.cfg = SoftargmaxConfig(beta)

    def heatmaps(self, images: np.ndarray) -> HeatmapStack:
        raw = generator_forward(self.gen, images.astype(np.float32, copy=False), self.spec)
        return normalize(raw, self.cfg)

    def predict(self, images: np.ndarray, batch_size: int = 16):
        """(points [N,K,2], per-sample scatter [N]) over an [N,3,H,W] array."""
        pts, scat = [], []
        for start in range(0, len(images), batch_size):
            stack = self.heatmaps(images[start : start + batch_size])
            pts.append(softargmax2d(stack).as_array())
            scale = estimate_scale(stack, softargmax2d(stack), LAPLACE).scale.data
            scat.append(scale.mean(axis=(-2, -1)))
        return np.concatenate(pts), np.concatenate(scat)


def evaluate_dataset(
    predictor: Predictor, manifest: DatasetManifest, norm: NormSpec, batch_size: int = 16
) -> EvalRecord:
    """Deterministic eval-mode sweep over a labeled manifest."""
    if len(manifest) == 0:
        raise ContractError("cannot evaluate an empty manifest")
    if manifest.landmark_count == 0:
        raise ContractError("evaluation requires a labeled manifest")
    images = manifest.load_images()
    truth_pts = manifest.points_array()
    pred_pts, scatter = predictor.predict(images, batch_size=batch_size)
    h, w = images.shape[2:]
    scores = np.empty(len(manifest))
    errors = []
    for i in range(len(manifest)):
        truth = LandmarkSet(truth_pts[i])
        scores[i] = nmse(LandmarkSet(pred_pts[i]), truth, norm, image_size=(h, w))
        errors.append(pred_pts[i] - truth_pts[i])
    return EvalRecord(scores, scatter, errors)
