"""Dense tensors with reverse-mode autodiff, plus Adam and gradient checks."""

from heatmark.engine import ops
from heatmark.engine.gradcheck import gradient_check
from heatmark.engine.optim import ParameterStore, adam_step
from heatmark.engine.rng import StreamHub
from heatmark.engine.tensor import Graph, Tensor, apply_primitive, backward

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "apply_primitive",
    "ops",
    "ParameterStore",
    "adam_step",
    "gradient_check",
    "StreamHub",
]
