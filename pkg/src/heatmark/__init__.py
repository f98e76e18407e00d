"""Heatmap-based landmark localization on a small numpy autodiff engine.

The package is organized around a handful of layers:

* ``heatmark.engine`` -- dense tensors, reverse-mode autodiff, Adam.
* ``heatmark.heatmaps`` -- conversions between heatmaps, coordinates and
  per-landmark location/scale parameters.
* ``heatmark.losses`` -- coordinate, distribution-matching (KL) and
  adversarial objectives.
* ``heatmark.models`` -- the encoder/decoder landmark generator and the
  patch discriminator.
* ``heatmark.training`` -- the alternating semi-supervised training loop.
* ``heatmark.data`` / ``heatmark.evaluate`` -- synthetic datasets, file
  formats, and NMSE evaluation.
* ``heatmark.estimator`` -- a scikit-learn style facade
  (``LandmarkLocalizer``) over the whole pipeline.
"""

from heatmark.engine.tensor import Graph, Tensor, backward

__version__ = "0.1.0"


def __getattr__(name):
    # deferred: the estimator pulls in the full training stack
    if name == "LandmarkLocalizer":
        from heatmark.estimator import LandmarkLocalizer

        return LandmarkLocalizer
    raise AttributeError(name)


__all__ = ["Tensor", "Graph", "backward", "LandmarkLocalizer", "__version__"]
