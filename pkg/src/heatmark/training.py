"""Alternating semi-supervised training and checkpointing.

Each step optionally updates the discriminator on real-vs-generated
heatmap stacks, then updates the generator on its supervised objective
plus the weighted adversarial term.  Real target stacks are rendered
constants; no gradient flows into them.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from heatmark import losses as losses_mod
from heatmark.data import read_container, write_container
from heatmark.engine import ops
from heatmark.engine.optim import ParameterStore, adam_step
from heatmark.engine.rng import StreamHub
from heatmark.engine.tensor import Graph, Tensor, backward
from heatmark.errors import (
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    TrainingError,
)
from heatmark.heatmaps import HeatmapStack, LandmarkSet, SoftargmaxConfig, normalize, render_target_heatmaps
from heatmark.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_models,
    discriminator_forward,
    generator_forward,
)

_CHECKPOINT_VERSION = 1.0


@dataclass
class TrainConfig:
    loss_kind: str = losses_mod.LAPLACE_KL
    adversarial: bool = False
    lambda_adv: float = 0.001
    beta: float = 1.0
    lr: float = 0.001
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_labeled: int = 16
    batch_unlabeled: int = 16
    channel_scale: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    input_size: tuple[int, int] = (80, 80)
    landmarks: int = 68
    saturating_adv: bool = False

    def __post_init__(self):
        if self.loss_kind not in losses_mod.LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {losses_mod.LOSS_KINDS}")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        self.input_size = tuple(self.input_size)

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            input_size=self.input_size,
            channel_scale=self.channel_scale,
            landmarks=self.landmarks,
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(landmarks=self.landmarks)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class StepReport:
    step: int
    gen_total: float
    gen_supervised: float
    gen_adversarial: float
    disc_loss: float
    wall_time: float

    def history_line(self) -> str:
        # wall time is intentionally absent: history files must be
        # bit-identical across reruns of the same seed/config
        return (
            f"{self.step}\t{self.gen_total:.8g}\t{self.gen_supervised:.8g}"
            f"\t{self.gen_adversarial:.8g}\t{self.disc_loss:.8g}"
        )


HISTORY_HEADER = "step\tgen_total\tgen_supervised\tgen_adversarial\tdisc_loss"


def _check_finite(step: int, breakdown: dict) -> None:
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise TrainingError(f"non-finite loss at step {step}", step=step, breakdown=breakdown)


def train_step(
    gen: ParameterStore,
    disc: ParameterStore,
    labeled_batch: tuple[np.ndarray, np.ndarray, Optional[np.ndarray]],
    unlabeled_batch: Optional[np.ndarray],
    cfg: TrainConfig,
    step: int,
    hub: StreamHub,
) -> StepReport:
    """One optimization step: discriminator first (when adversarial), then
    the generator.  Batches are numpy arrays; see :func:`fit`."""
    t_start = time.perf_counter()
    images, points, visible = labeled_batch
    gspec, dspec = cfg.generator_spec(), cfg.discriminator_spec()
    streams = hub.step_streams(step)
    truth = LandmarkSet(points, visible)
    sam_cfg = SoftargmaxConfig(cfg.beta)
    disc_loss_val = float("nan")

    if cfg.adversarial:
        if unlabeled_batch is None or len(unlabeled_batch) == 0:
            raise ContractError("adversarial training requires an unlabeled batch")
        real_h = render_target_heatmaps(truth, *cfg.input_size)
        # discriminator phase: generated stacks are constants here
        fake_raw = generator_forward(gen, unlabeled_batch, gspec, ops.TRAIN, streams)
        fake_const = HeatmapStack(normalize(fake_raw, sam_cfg).maps.detach(), normalized=True)
        with Graph() as g_disc:
            d_real = discriminator_forward(disc, images, real_h, dspec, ops.TRAIN, streams)
            d_fake = discriminator_forward(disc, unlabeled_batch, fake_const, dspec, ops.TRAIN, streams)
            d_loss, _ = losses_mod.adversarial_losses(d_real, d_fake, cfg.saturating_adv)
        disc_loss_val = d_loss.item()
        _check_finite(step, {"disc": disc_loss_val})
        backward(d_loss.scalar, g_disc)
        adam_step(disc, cfg.lr, cfg.weight_decay)

        with Graph() as g_gen:
            raw = generator_forward(gen, images, gspec, ops.TRAIN, streams)
            sup = losses_mod.supervised_loss(raw, truth, cfg.loss_kind, sam_cfg)
            fake_raw2 = generator_forward(gen, unlabeled_batch, gspec, ops.TRAIN, streams)
            fake_h2 = normalize(fake_raw2, sam_cfg)
            d_fake2 = discriminator_forward(disc, unlabeled_batch, fake_h2, dspec, ops.TRAIN, streams)
            _, g_adv = losses_mod.adversarial_losses(d_fake2.detach(), d_fake2, cfg.saturating_adv)
            total = losses_mod.total_generator_loss(sup, g_adv, cfg.lambda_adv)
        _check_finite(step, total.breakdown | {"total": total.item()})
        backward(total.scalar, g_gen)
        adam_step(gen, cfg.lr, cfg.weight_decay)
        disc.zero_grads()  # discard spillover from the generator phase
        report = StepReport(
            step,
            total.item(),
            total.breakdown["supervised"],
            total.breakdown["adversarial"],
            disc_loss_val,
            time.perf_counter() - t_start,
        )
    else:
        with Graph() as g_gen:
            raw = generator_forward(gen, images, gspec, ops.TRAIN, streams)
            sup = losses_mod.supervised_loss(raw, truth, cfg.loss_kind, sam_cfg)
        _check_finite(step, {"supervised": sup.item()})
        backward(sup.scalar, g_gen)
        adam_step(gen, cfg.lr, cfg.weight_decay)
        report = StepReport(
            step, sup.item(), sup.item(), 0.0, disc_loss_val, time.perf_counter() - t_start
        )
    return report


def steps_per_epoch(n_labeled: int, batch: int) -> int:
    return max(1, math.ceil(n_labeled / batch))


def fit(
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled: Optional[np.ndarray],
    cfg: TrainConfig,
    sink: Optional[Callable[[StepReport], None]] = None,
    out_dir=None,
    init: Optional[tuple[ParameterStore, ParameterStore]] = None,
    start_step: int = 0,
    on_finish: Optional[Callable[[ParameterStore, ParameterStore], None]] = None,
) -> tuple[ParameterStore, ParameterStore, list[StepReport]]:
    """Run the training loop for ``cfg.epochs`` passes over the labeled set.

    ``labeled`` is ``(images [N,3,H,W], points [N,K,2])``; ``unlabeled`` is
    an image array or None.  Shuffling is reseeded per epoch; when the
    unlabeled pool is smaller than an epoch needs, it is sampled with
    replacement.  Checkpoints and ``history.tsv`` are written under
    ``out_dir`` when given; on a training failure a crash checkpoint is
    saved before the error propagates.
    """
    images, points = labeled
    n = len(images)
    if n == 0:
        raise ContractError("labeled set is empty")
    if cfg.adversarial and (unlabeled is None or len(unlabeled) == 0):
        raise ContractError("adversarial config requires unlabeled data")
    hub = StreamHub(cfg.seed)
    gen, disc = init if init is not None else build_models(
        cfg.generator_spec(), cfg.discriminator_spec(), cfg.seed
    )
    spe = steps_per_epoch(n, cfg.batch_labeled)
    total_steps = cfg.epochs * spe
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[StepReport] = []
    history_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if start_step else "w"
        history_fh = open(out_dir / "history.tsv", mode, encoding="utf-8")
        if not start_step:
            history_fh.write(HISTORY_HEADER + "\n")

    perm = np.empty(0, np.intp)
    unlab_idx = np.empty(0, np.intp)
    current_epoch = -1
    try:
        for step in range(start_step, total_steps):
            epoch, pos = divmod(step, spe)
            if epoch != current_epoch:
                current_epoch = epoch
                perm = hub.generator("shuffle.labeled", epoch).permutation(n)
                if unlabeled is not None and len(unlabeled):
                    needed = spe * cfg.batch_unlabeled
                    rng_u = hub.generator("shuffle.unlabeled", epoch)
                    if len(unlabeled) >= needed:
                        unlab_idx = rng_u.permutation(len(unlabeled))[:needed]
                    else:
                        unlab_idx = rng_u.choice(len(unlabeled), size=needed, replace=True)
            sel = perm[pos * cfg.batch_labeled : (pos + 1) * cfg.batch_labeled]
            batch = (images[sel], points[sel], None)
            u_batch = None
            if cfg.adversarial:
                usel = unlab_idx[pos * cfg.batch_unlabeled : (pos + 1) * cfg.batch_unlabeled]
                u_batch = unlabeled[usel]
            try:
                report = train_step(gen, disc, batch, u_batch, cfg, step, hub)
            except (TrainingError, NumericError):
                if out_dir is not None:
                    save_checkpoint(out_dir / "crash.ckpt", gen, disc, cfg, step)
                raise
            history.append(report)
            if sink is not None:
                sink(report)
            if history_fh is not None:
                history_fh.write(report.history_line() + "\n")
            if (
                out_dir is not None
                and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.ckpt", gen, disc, cfg, step + 1)
    finally:
        if history_fh is not None:
            history_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", gen, disc, cfg, total_steps)
    if on_finish is not None:
        on_finish(gen, disc)
    return gen, disc, history


# -- checkpoints ---------------------------------------------------------------


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8)).decode("utf-8")


def _pack_store(prefix: str, store: ParameterStore, entries: dict) -> None:
    for name, t in store.params.items():
        entries[f"{prefix}/param/{name}"] = t.data
        entries[f"{prefix}/adam_m/{name}"] = store.adam_m[name]
        entries[f"{prefix}/adam_v/{name}"] = store.adam_v[name]
    for name, buf in store.buffers.items():
        entries[f"{prefix}/buffer/{name}"] = buf
    entries[f"{prefix}/step_count"] = np.float32(store.step_count)


def _unpack_store(prefix: str, entries: dict) -> ParameterStore:
    store = ParameterStore()
    for key, value in entries.items():
        if key.startswith(f"{prefix}/param/"):
            store.add(key[len(prefix) + 7 :], value)
    for name in store.params:
        for slot, target in (("adam_m", store.adam_m), ("adam_v", store.adam_v)):
            key = f"{prefix}/{slot}/{name}"
            if key not in entries:
                raise FormatError(f"checkpoint missing {key}")
            if entries[key].shape != store.params[name].shape:
                raise FormatError(f"checkpoint shape mismatch for {key}")
            target[name] = entries[key]
    for key, value in entries.items():
        if key.startswith(f"{prefix}/buffer/"):
            store.add_buffer(key[len(prefix) + 8 :], value)
    step_key = f"{prefix}/step_count"
    if step_key not in entries:
        raise FormatError(f"checkpoint missing {step_key}")
    store.step_count = int(entries[step_key])
    return store


def save_checkpoint(path, gen: ParameterStore, disc: ParameterStore, cfg: TrainConfig, step: int) -> None:
    entries: dict[str, np.ndarray] = {
        "meta/version": np.float32(_CHECKPOINT_VERSION),
        "meta/step": np.float32(step),
        "meta/config": _encode_text(cfg.to_json()),
    }
    _pack_store("gen", gen, entries)
    _pack_store("disc", disc, entries)
    write_container(path, entries)


def load_checkpoint(path) -> tuple[ParameterStore, ParameterStore, TrainConfig, int]:
    entries = read_container(path)
    if "meta/version" not in entries or float(entries["meta/version"]) != _CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    cfg = TrainConfig.from_json(_decode_text(entries["meta/config"]))
    step = int(entries["meta/step"])
    gen = _unpack_store("gen", entries)
    disc = _unpack_store("disc", entries)
    expected = {f"{n}.w" for n in ("e1", "e2", "e3", "e4")}
    if not expected.issubset(gen.params.keys()):
        raise FormatError(f"{path}: generator parameters incomplete")
    return gen, disc, cfg, step
