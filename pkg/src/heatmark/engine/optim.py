"""Named parameter collections and the Adam update."""

from __future__ import annotations

import numpy as np

from heatmark.engine.ops import BatchNormState
from heatmark.engine.tensor import Tensor
from heatmark.errors import ContractError


class ParameterStore:
    """Named trainable tensors plus their Adam state and non-trainable buffers.

    ``params`` maps name -> Tensor (requires_grad always true);
    ``buffers`` holds running statistics and similar state that is
    checkpointed but never optimized.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def bn_state(self, prefix: str) -> BatchNormState:
        """View two buffers ``<prefix>.running_mean/var`` as a BN state."""
        state = BatchNormState.__new__(BatchNormState)
        state.mean = self.buffers[prefix + ".running_mean"]
        state.var = self.buffers[prefix + ".running_var"]
        return state


def adam_step(
    store: ParameterStore,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update over every parameter in the store.

    Weight decay enters as an additive L2 term on the gradient (classic
    coupled form).  All gradients must be populated; they are zeroed
    after the update.
    """
    b1, b2 = betas
    missing = [n for n, t in store.params.items() if t.grad is None]
    if missing:
        raise ContractError(f"adam_step: missing gradient for parameter(s) {missing}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        p.grad = None
