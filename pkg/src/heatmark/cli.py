"""Command-line interface: data synthesis, training, evaluation, inference,
rendering, the channel-scale ablation, and the gradient-check harness.

Every command echoes its full effective configuration before doing work,
so a run is reproducible from its log.  An optional ``--config FILE`` of
``key=value`` lines supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from heatmark import data as data_mod
from heatmark import evaluate as eval_mod
from heatmark import losses as losses_mod
from heatmark import training as training_mod
from heatmark.engine.gradcheck import run_primitive_checks
from heatmark.errors import HeatmarkError
from heatmark.heatmaps import decode_argmax, write_pgm, write_ppm
from heatmark.models import generator_forward

_LOSS_FLAGS = {
    "softargmax": losses_mod.SOFTARGMAX,
    "laplacekl": losses_mod.LAPLACE_KL,
    "gausskl": losses_mod.GAUSSIAN_KL,
}
_NORM_FLAGS = {
    "interocular": eval_mod.INTEROCULAR,
    "bbox-sqrt": eval_mod.BBOX_SQRT,
    "diagonal": eval_mod.DIAGONAL,
}


def parse_scale(text: str) -> float:
    """Accept '1', '1/2', '0.25', ... as channel scale factors."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _echo_config(args: argparse.Namespace) -> None:
    skip = {"func", "config"}
    for key in sorted(vars(args)):
        if key not in skip:
            print(f"config: {key}={getattr(args, key)}")
    sys.stdout.flush()


def _load_manifest(path) -> data_mod.DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.tsv"
    return data_mod.read_manifest(p)


def _load_predictor(model_path):
    gen, _, cfg, _ = training_mod.load_checkpoint(model_path)
    return eval_mod.Predictor(gen, cfg.generator_spec(), cfg.beta), cfg


# -- command handlers --------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = data_mod.generate_synthetic_dataset(
        args.out, args.count, (args.size, args.size), args.landmarks, args.seed
    )
    print(f"wrote {len(manifest)} samples under {args.out}")
    return 0


def _train_config(args) -> training_mod.TrainConfig:
    return training_mod.TrainConfig(
        loss_kind=_LOSS_FLAGS[args.loss],
        adversarial=args.adversarial,
        lambda_adv=args.adv_weight,
        beta=args.beta,
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_labeled=args.batch,
        batch_unlabeled=args.batch,
        channel_scale=parse_scale(args.channel_scale),
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        landmarks=args.k_hint or 68,
    )


def _load_training_data(args):
    labeled = _load_manifest(args.labeled)
    if len(labeled) == 0 or labeled.landmark_count == 0:
        raise HeatmarkError(f"labeled manifest {args.labeled} is empty or unlabeled")
    images, points = labeled.load_images(), labeled.points_array()
    unlabeled_imgs = None
    if args.unlabeled:
        unlabeled_imgs = _load_manifest(args.unlabeled).load_images()
    return images, points, unlabeled_imgs


def cmd_train(args) -> int:
    images, points, unlabeled_imgs = _load_training_data(args)
    cfg = _train_config(args)
    cfg.landmarks = points.shape[1]
    cfg.input_size = tuple(images.shape[2:])

    def sink(report: training_mod.StepReport) -> None:
        if report.step % args.log_every == 0:
            print(
                f"step {report.step}: total {report.gen_total:.4f} "
                f"sup {report.gen_supervised:.4f} adv {report.gen_adversarial:.6f} "
                f"disc {report.disc_loss:.4f} ({report.wall_time:.2f}s)",
                flush=True,
            )

    training_mod.fit((images, points), unlabeled_imgs, cfg, sink=sink, out_dir=args.out)
    print(f"model written to {Path(args.out) / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    predictor, cfg = _load_predictor(args.model)
    manifest = _load_manifest(args.data)
    norm = eval_mod.NormSpec(_NORM_FLAGS[args.norm], args.norm_index_a, args.norm_index_b)
    record = eval_mod.evaluate_dataset(predictor, manifest, norm)
    for line in record.tsv_lines():
        print(line)
    print(record.summary_line(cfg.loss_kind + ("+adv" if cfg.adversarial else ""), str(args.data)))
    return 0


def cmd_infer(args) -> int:
    predictor, _ = _load_predictor(args.model)
    image = data_mod.read_tensor(args.image)
    points, scatter = predictor.predict(image[None])
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("landmark\tx\ty\n")
        for i, (x, y) in enumerate(points[0]):
            fh.write(f"{i}\t{x:.6f}\t{y:.6f}\n")
    print(f"landmarks written to {args.out} (mean scatter {scatter[0]:.3f} px)")
    return 0


def cmd_render(args) -> int:
    predictor, _ = _load_predictor(args.model)
    image = data_mod.read_tensor(args.image)
    stack = predictor.heatmaps(image[None])
    maps = stack.maps.data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(maps.shape[0]):
        write_pgm(out / f"heatmap_{k:02d}.pgm", maps[k])
    # overlay: heatmap mass in red over a dimmed image, argmax dots in white
    overlay = 0.5 * image.copy()
    total = maps.sum(axis=0)
    overlay[0] += 0.5 * total / max(total.max(), 1e-12)
    peaks = decode_argmax(stack).as_array()[0]
    h, w = image.shape[1:]
    for x, y in peaks:
        xi, yi = int(round(x)), int(round(y))
        overlay[:, max(0, yi - 1) : yi + 2, max(0, xi - 1) : xi + 2] = 1.0
    np.clip(overlay, 0.0, 1.0, out=overlay)
    write_ppm(out / "overlay.ppm", overlay)
    print(f"wrote {maps.shape[0]} heatmaps and overlay.ppm under {out}")
    return 0


def cmd_ablate(args) -> int:
    images, points, unlabeled_imgs = _load_training_data(args)
    heldout = _load_manifest(args.heldout) if args.heldout else None
    scales = [parse_scale(s) for s in args.scales.split(",")]
    norm = eval_mod.NormSpec(eval_mod.DIAGONAL)
    rows = ["scale\tparameters\tstorage_mb\tnmse\tfps"]
    for scale in scales:
        cfg = _train_config(args)
        cfg.channel_scale = scale
        cfg.landmarks = points.shape[1]
        cfg.input_size = tuple(images.shape[2:])
        t0 = time.time()
        gen, _, _ = training_mod.fit((images, points), unlabeled_imgs, cfg)
        predictor = eval_mod.Predictor(gen, cfg.generator_spec(), cfg.beta)
        if heldout is not None:
            record = eval_mod.evaluate_dataset(predictor, heldout, norm)
            score = record.mean_nmse
        else:
            score = eval_mod.evaluate_dataset(
                predictor, _load_manifest(args.labeled), norm
            ).mean_nmse
        fps = measure_fps(gen, cfg, images[0], iterations=args.fps_iters)
        n_params = gen.parameter_count()
        rows.append(
            f"{scale:g}\t{n_params}\t{4e-6 * n_params:.3f}\t{score:.6f}\t{fps:.2f}"
        )
        print(f"scale {scale:g}: params {n_params} nmse {score:.6f} fps {fps:.2f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"report written to {args.out}")
    return 0


def measure_fps(gen, cfg, image: np.ndarray, iterations: int = 100, warmup: int = 10) -> float:
    """Single-image eval-mode forward throughput."""
    spec = cfg.generator_spec()
    batch = image[None].astype(np.float32)
    for _ in range(warmup):
        generator_forward(gen, batch, spec)
    t0 = time.perf_counter()
    for _ in range(iterations):
        generator_forward(gen, batch, spec)
    return iterations / (time.perf_counter() - t0)


def cmd_gradcheck(args) -> int:
    results = run_primitive_checks(full=args.full)
    if args.full:
        results.update(_end_to_end_checks())
    worst = 0.0
    for name, err in sorted(results.items()):
        print(f"{name:28s} {err:.3e}")
        worst = max(worst, err)
    ok = worst <= 1e-6
    print(f"max relative error: {worst:.3e} -> {'OK' if ok else 'FAIL'}")
    return 0 if ok else 1


def _end_to_end_checks() -> dict[str, float]:
    """Each supervised loss differentiated through a reduced generator."""
    from heatmark.engine.gradcheck import gradient_check
    from heatmark.engine.tensor import Tensor
    from heatmark.heatmaps import LandmarkSet, SoftargmaxConfig
    from heatmark.models import GeneratorSpec, build_generator
    from heatmark.engine.rng import StreamHub

    spec = GeneratorSpec(input_size=(16, 16), channel_scale=0.0625, landmarks=3)
    store = build_generator(spec, StreamHub(5))
    for t in store.params.values():
        t.data = t.data.astype(np.float64)
    rng = np.random.default_rng(9)
    image = rng.random((1, 3, 16, 16))
    truth = LandmarkSet(rng.uniform(3, 12, size=(1, 3, 2)))
    out = {}
    for kind in losses_mod.LOSS_KINDS:
        def fn(x, kind=kind):
            raw = generator_forward(store, x, spec)
            return losses_mod.supervised_loss(raw, truth, kind, SoftargmaxConfig()).scalar

        out[f"generator+{kind}"] = gradient_check(fn, Tensor(image, dtype=np.float64))
    return out


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatmark",
        description="Heatmap landmark localization: synthesis, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flag(p):
        p.add_argument("--config", default=None, help="key=value defaults file (flags win)")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    add_config_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=80)
    p.add_argument("--landmarks", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p, with_out=True):
        p.add_argument("--labeled", required=True)
        p.add_argument("--unlabeled", default=None)
        p.add_argument("--loss", choices=sorted(_LOSS_FLAGS), default="laplacekl")
        p.add_argument("--adversarial", action="store_true")
        p.add_argument("--adv-weight", type=float, default=0.001)
        p.add_argument("--beta", type=float, default=1.0)
        p.add_argument("--lr", type=float, default=0.001)
        p.add_argument("--weight-decay", type=float, default=1e-5)
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--batch", type=int, default=16)
        p.add_argument("--channel-scale", default="1")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint-every", type=int, default=0)
        p.add_argument("--log-every", type=int, default=10)
        p.add_argument("--k-hint", type=int, default=None, help=argparse.SUPPRESS)
        if with_out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a landmark model")
    add_config_flag(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a labeled dataset")
    add_config_flag(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norm", choices=sorted(_NORM_FLAGS), default="diagonal")
    p.add_argument("--norm-index-a", type=int, default=0)
    p.add_argument("--norm-index-b", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict landmarks for one image")
    add_config_flag(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="export heatmaps and an overlay image")
    add_config_flag(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="train/evaluate across channel scales")
    add_config_flag(p)
    add_train_flags(p, with_out=False)
    p.add_argument("--heldout", default=None, help="labeled manifest for NMSE (default: labeled)")
    p.add_argument("--scales", default="1,1/2,1/4,1/8,1/16")
    p.add_argument("--fps-iters", type=int, default=100)
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    add_config_flag(p)
    p.add_argument("--full", action="store_true", help="include end-to-end model checks")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Read --config key=value defaults into the subcommand parser."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config requires a file path")
    path = Path(argv[idx + 1])
    if not path.exists():
        parser.error(f"config file {path} not found")
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"{path}: line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    # turn them into leading flags so explicit argv flags take precedence
    injected: list[str] = []
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                injected.append(flag)
        else:
            injected.extend([flag, value])
    head, tail = argv[:1], argv[1:]
    return head + injected + tail


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv:
        argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except HeatmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
