"""Scikit-learn style facade over the training and inference pipeline.

``LandmarkLocalizer`` follows the estimator contract (``get_params`` /
``set_params`` via ``BaseEstimator``, ``fit`` / ``predict`` /
``transform`` / ``score``), so it composes with model selection and
pipeline tooling from the wider ecosystem.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from heatmark import losses as losses_mod
from heatmark import training as training_mod
from heatmark.errors import ContractError
from heatmark.evaluate import DIAGONAL, NormSpec, Predictor, nmse
from heatmark.heatmaps import LandmarkSet


def check_image_array(X, name: str = "X") -> np.ndarray:
    """Validate an [N, 3, H, W] float image batch (H, W multiples of 16)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ContractError(f"{name} must have shape [N, 3, H, W], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ContractError(f"{name} is empty")
    if arr.shape[2] % 16 or arr.shape[3] % 16:
        raise ContractError(f"{name} spatial size {arr.shape[2:]} must be divisible by 16")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_landmark_array(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate an [N, K, 2] coordinate batch matching ``n_samples``."""
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ContractError(f"{name} must have shape [N, K, 2], got {arr.shape}")
    if arr.shape[0] != n_samples:
        raise ContractError(f"{name} has {arr.shape[0]} rows, expected {n_samples}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


class LandmarkLocalizer(BaseEstimator):
    """Heatmap landmark localizer with optional semi-supervised training.

    Parameters mirror the training configuration; see ``TrainConfig``.
    ``fit`` accepts an optional unlabeled image batch that is only used
    when ``adversarial=True``.
    """

    def __init__(
        self,
        loss: str = losses_mod.LAPLACE_KL,
        adversarial: bool = False,
        lambda_adv: float = 0.001,
        beta: float = 1.0,
        lr: float = 0.001,
        weight_decay: float = 1e-5,
        epochs: int = 200,
        batch_size: int = 16,
        channel_scale: float = 1.0,
        seed: int = 0,
    ):
        self.loss = loss
        self.adversarial = adversarial
        self.lambda_adv = lambda_adv
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.channel_scale = channel_scale
        self.seed = seed

    def _config(self, input_size, landmarks) -> training_mod.TrainConfig:
        return training_mod.TrainConfig(
            loss_kind=self.loss,
            adversarial=self.adversarial,
            lambda_adv=self.lambda_adv,
            beta=self.beta,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_labeled=self.batch_size,
            batch_unlabeled=self.batch_size,
            channel_scale=self.channel_scale,
            seed=self.seed,
            input_size=input_size,
            landmarks=landmarks,
        )

    def fit(self, X, y, X_unlabeled=None, sink=None):
        images = check_image_array(X)
        points = check_landmark_array(y, len(images))
        unlabeled = None
        if X_unlabeled is not None:
            unlabeled = check_image_array(X_unlabeled, name="X_unlabeled")
            if unlabeled.shape[2:] != images.shape[2:]:
                raise ContractError("labeled and unlabeled image sizes differ")
        cfg = self._config(tuple(images.shape[2:]), points.shape[1])
        gen, disc, history = training_mod.fit((images, points), unlabeled, cfg, sink=sink)
        self.config_ = cfg
        self.generator_ = gen
        self.discriminator_ = disc
        self.history_ = history
        self.predictor_ = Predictor(gen, cfg.generator_spec(), cfg.beta)
        return self

    def _require_fitted(self) -> Predictor:
        predictor = getattr(self, "predictor_", None)
        if predictor is None:
            raise NotFittedError("LandmarkLocalizer must be fitted before use")
        return predictor

    def predict(self, X) -> np.ndarray:
        """Landmark coordinates [N, K, 2] for an image batch."""
        predictor = self._require_fitted()
        images = check_image_array(X)
        points, _ = predictor.predict(images, batch_size=self.batch_size)
        return points

    def transform(self, X) -> np.ndarray:
        """Normalized heatmap stacks [N, K, H, W] for an image batch."""
        predictor = self._require_fitted()
        images = check_image_array(X)
        out = []
        for start in range(0, len(images), self.batch_size):
            out.append(predictor.heatmaps(images[start : start + self.batch_size]).maps.data)
        return np.concatenate(out)

    def score(self, X, y) -> float:
        """Negative mean NMSE (diagonal normalization); higher is better."""
        images = check_image_array(X)
        points = check_landmark_array(y, len(images))
        pred = self.predict(images)
        norm = NormSpec(DIAGONAL)
        size = images.shape[2:]
        scores = [
            nmse(LandmarkSet(pred[i]), LandmarkSet(points[i]), norm, image_size=size)
            for i in range(len(images))
        ]
        return -float(np.mean(scores))
