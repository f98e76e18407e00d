"""The landmark generator (encoder/decoder with skips) and patch discriminator.

The generator halves resolution four times, then rebuilds it with four
bilinear upsamplings; each decoder level compresses channels with a 1x1
convolution, concatenates the matching pre-pool encoder activation, and a
5x5 fusion convolution mixes the merged features.  A global channel-scale
factor shrinks every width for the size-ablation study while the landmark
head widths stay fixed.

Internally all activations are channels-last; public inputs/outputs use
``[B, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from heatmark.engine import ops
from heatmark.engine.optim import ParameterStore
from heatmark.engine.rng import StepStreams, StreamHub
from heatmark.engine.tensor import Tensor
from heatmark.errors import ConfigError, ContractError, ShapeError
from heatmark.heatmaps import HeatmapStack

CHANNEL_SCALES = (1.0, 0.5, 0.25, 0.125, 0.0625)


@dataclass
class GeneratorSpec:
    input_size: tuple[int, int] = (80, 80)
    base_channels: int = 64
    channel_scale: float = 1.0
    landmarks: int = 68
    leaky_slope: float = 0.2
    dropout_p: float = 0.2

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ConfigError(f"input size {self.input_size} must be divisible by 16")
        c = self.base_channels * self.channel_scale
        if c < 1 or abs(c - round(c)) > 1e-9:
            raise ConfigError(
                f"channel scale {self.channel_scale} gives non-integral or zero width {c}"
            )
        if self.landmarks < 1:
            raise ConfigError("landmark count must be >= 1")

    @property
    def width(self) -> int:
        """Encoder / decoder-output channel count."""
        return int(round(self.base_channels * self.channel_scale))

    @property
    def fused_width(self) -> int:
        """Width after skip concatenation (input of the fusion convs)."""
        return 2 * self.width


@dataclass
class DiscriminatorSpec:
    landmarks: int = 68
    image_channels: int = 3
    widths: tuple[int, int, int] = (64, 128, 256)
    kernel: int = 4
    noise_sigma: float = 0.2
    leaky_slope: float = 0.2

    @property
    def input_channels(self) -> int:
        return self.landmarks + self.image_channels


def _init_conv(store: ParameterStore, hub: StreamHub, name: str, kh, kw, cin, cout):
    fan_in = kh * kw * cin
    bound = 1.0 / np.sqrt(fan_in)
    rng = hub.generator(f"init/{name}")
    w = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(np.float32)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(cout, dtype=np.float32))


def build_generator(spec: GeneratorSpec, hub: StreamHub) -> ParameterStore:
    c, f, k = spec.width, spec.fused_width, spec.landmarks
    store = ParameterStore()
    _init_conv(store, hub, "e1", 3, 3, 3, c)
    for name in ("e2", "e3", "e4"):
        _init_conv(store, hub, name, 3, 3, c, c)
    _init_conv(store, hub, "d4", 1, 1, c, c)
    for name in ("d3", "d2", "d1"):
        _init_conv(store, hub, name, 1, 1, f, c)
    for name in ("f1", "f2", "f3", "f4"):
        _init_conv(store, hub, name, 5, 5, f, f)
    _init_conv(store, hub, "t", 3, 3, f, c)
    _init_conv(store, hub, "head1", 1, 1, c, k)
    _init_conv(store, hub, "head2", 1, 1, k, k)
    _init_conv(store, hub, "head3", 1, 1, k, k)
    return store


def build_discriminator(spec: DiscriminatorSpec, hub: StreamHub) -> ParameterStore:
    store = ParameterStore()
    w1, w2, w3 = spec.widths
    kk = spec.kernel
    _init_conv(store, hub, "l1", kk, kk, spec.input_channels, w1)
    _init_conv(store, hub, "l2", kk, kk, w1, w2)
    _init_conv(store, hub, "l3", kk, kk, w2, w3)
    _init_conv(store, hub, "l4", kk, kk, w3, 1)
    for name, width in (("l2", w2), ("l3", w3)):
        store.add(f"{name}.bn.gamma", np.ones(width, dtype=np.float32))
        store.add(f"{name}.bn.beta", np.zeros(width, dtype=np.float32))
        store.add_buffer(f"{name}.bn.running_mean", np.zeros(width, dtype=np.float32))
        store.add_buffer(f"{name}.bn.running_var", np.ones(width, dtype=np.float32))
    return store


def build_models(
    gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int
) -> tuple[ParameterStore, ParameterStore]:
    """Freshly initialized parameter stores, deterministic per seed."""
    hub = StreamHub(seed)
    return build_generator(gen_spec, hub), build_discriminator(disc_spec, hub)


def _as_nhwc(images: Union[Tensor, np.ndarray], channels: int, name: str) -> Tensor:
    t = images if isinstance(images, Tensor) else Tensor(images)
    if t.ndim != 4 or t.shape[1] != channels:
        raise ShapeError(f"{name}: expected [B,{channels},H,W], got {t.shape}")
    return ops.transpose(t, (0, 2, 3, 1))


def _conv(store, name, x, *, padding, stride=1):
    return ops.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, padding=padding)


def generator_forward(
    store: ParameterStore,
    images: Union[Tensor, np.ndarray],
    spec: GeneratorSpec,
    mode: str = ops.EVAL,
    streams: Optional[StepStreams] = None,
    trace: Optional[list] = None,
) -> HeatmapStack:
    """Raw (unnormalized) per-landmark score maps at input resolution."""
    if mode == ops.TRAIN and spec.dropout_p > 0 and streams is None:
        raise ContractError("train-mode forward requires RNG streams")
    x = _as_nhwc(images, 3, "generator_forward")
    if (x.shape[1], x.shape[2]) != tuple(spec.input_size):
        raise ShapeError(
            f"generator_forward: spatial size {x.shape[1:3]} != spec {spec.input_size}"
        )
    slope, p = spec.leaky_slope, spec.dropout_p

    def drop(t, site):
        rng = streams.generator(f"gen.drop.{site}") if mode == ops.TRAIN else None
        return ops.dropout(t, p, mode, rng)

    def note(label, t):
        if trace is not None:
            trace.append((label, (t.shape[1], t.shape[2], t.shape[3])))

    skips = {}
    for name in ("e1", "e2", "e3", "e4"):
        x = drop(ops.leaky_relu(_conv(store, name, x, padding=1), slope), name)
        skips[name] = x
        x = ops.max_pool2d(x)
        note(name, x)

    # level merge: 1x1 compress, upsample, concatenate the pre-pool skip
    x = ops.upsample_bilinear2x(drop(ops.leaky_relu(_conv(store, "d4", x, padding=0), slope), "d4"))
    x = ops.concat([x, skips["e4"]], axis=-1)
    note("d4", x)
    x = ops.leaky_relu(_conv(store, "f1", ops.upsample_bilinear2x(x), padding=2), slope)
    note("f1", x)

    for dname, fname, skip in (("d3", "f2", "e3"), ("d2", "f3", "e2")):
        x = drop(ops.leaky_relu(_conv(store, dname, x, padding=0), slope), dname)
        x = ops.concat([x, skips[skip]], axis=-1)
        note(dname, x)
        x = drop(
            ops.leaky_relu(_conv(store, fname, ops.upsample_bilinear2x(x), padding=2), slope),
            fname,
        )
        note(fname, x)

    x = drop(ops.leaky_relu(_conv(store, "d1", x, padding=0), slope), "d1")
    x = ops.concat([x, skips["e1"]], axis=-1)
    note("d1", x)
    x = drop(ops.leaky_relu(_conv(store, "f4", x, padding=2), slope), "f4")
    note("f4", x)

    x = drop(ops.leaky_relu(_conv(store, "t", x, padding=1), slope), "t")
    x = drop(ops.leaky_relu(_conv(store, "head1", x, padding=0), slope), "head1")
    note("head1", x)
    x = ops.leaky_relu(_conv(store, "head2", x, padding=0), slope)
    x = _conv(store, "head3", x, padding=0)
    note("output", x)

    raw = ops.transpose(x, (0, 3, 1, 2))
    return HeatmapStack(raw, normalized=False)


def discriminator_forward(
    store: ParameterStore,
    images: Union[Tensor, np.ndarray],
    heatmaps: Union[HeatmapStack, Tensor],
    spec: DiscriminatorSpec,
    mode: str = ops.EVAL,
    streams: Optional[StepStreams] = None,
) -> Tensor:
    """Patch score map in (0, 1) for image/heatmap stacks.

    The RGB image is stacked with the K heatmaps on the channel axis; in
    train mode each convolution input is perturbed with Gaussian noise.
    """
    if mode == ops.TRAIN and spec.noise_sigma > 0 and streams is None:
        raise ContractError("train-mode forward requires RNG streams")
    maps = heatmaps.maps if isinstance(heatmaps, HeatmapStack) else heatmaps
    img = _as_nhwc(images, spec.image_channels, "discriminator_forward")
    hm = _as_nhwc(maps, spec.landmarks, "discriminator_forward")
    if img.shape[1:3] != hm.shape[1:3]:
        raise ShapeError(
            f"discriminator_forward: image {img.shape[1:3]} vs heatmap {hm.shape[1:3]} sizes differ"
        )
    x = ops.concat([img, hm], axis=-1)
    slope = spec.leaky_slope

    def noisy(t, site):
        rng = streams.generator(f"disc.noise.{site}") if mode == ops.TRAIN else None
        return ops.gaussian_noise(t, spec.noise_sigma, mode, rng)

    x = ops.leaky_relu(_conv(store, "l1", noisy(x, "l1"), padding=1, stride=2), slope)
    for name in ("l2", "l3"):
        x = _conv(store, name, noisy(x, name), padding=1, stride=2)
        x = ops.batch_norm(
            x, store[f"{name}.bn.gamma"], store[f"{name}.bn.beta"], store.bn_state(f"{name}.bn"), mode
        )
        x = ops.leaky_relu(x, slope)
    x = ops.sigmoid(_conv(store, "l4", noisy(x, "l4"), padding=1, stride=1))
    return ops.reshape(x, x.shape[:3])
