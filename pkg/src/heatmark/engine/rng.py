"""Deterministic, named random streams.

All stochastic draws in the package (weight init, dropout masks, noise,
data shuffles, synthetic rendering) come from a single root seed through
counter-based Philox streams.  A stream is addressed by a string name plus
integer counters, so any draw can be reproduced from ``(seed, name,
counters)`` alone -- resuming a run at step ``t`` replays the exact
stream a fresh run would have used at step ``t``, with no mutable RNG
state to checkpoint.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, int]:
    # Stable 64-bit digest; python's hash() is salted per process.
    d = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(d[:4], "little"), int.from_bytes(d[4:], "little")


class StreamHub:
    """Root of all randomness: hands out generators for named substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str, *counters: int) -> np.random.Generator:
        key = _name_key(name) + tuple(int(c) & 0xFFFFFFFF for c in counters)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def step_streams(self, step: int) -> "StepStreams":
        return StepStreams(self, step)


class StepStreams:
    """Per-training-step view of the hub.

    Repeated requests for the same name within a step get distinct
    occurrence counters, so e.g. two forward passes through the same
    dropout site draw independent (but reproducible) masks.
    """

    def __init__(self, hub: StreamHub, step: int):
        self._hub = hub
        self._step = int(step)
        self._counts: dict[str, int] = {}

    def generator(self, name: str) -> np.random.Generator:
        occurrence = self._counts.get(name, 0)
        self._counts[name] = occurrence + 1
        return self._hub.generator(name, self._step, occurrence)
