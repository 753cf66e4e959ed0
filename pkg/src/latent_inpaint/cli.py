"""Command-line entry point.

Subcommands: train, inpaint, eval, generate, mask.  Every run that owns
an output directory writes its fully resolved configuration there, so a
run is reproducible from that file alone.  Exit codes: 0 success, 2 bad
arguments, 3 data error, 4 numerical abort, 5 isolated-hole mask.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data_io, metrics
from .autodiff import Tensor, no_grad
from .errors import DataError, IsolatedHoleError, NumericalError
from .inpaint import (
    InpaintConfig,
    composite,
    compute_weight_map,
    config_dict,
    find_closest_encoding,
)
from .networks import build_from_checkpoint, init_params
from .poisson import _check_hole_connectivity
from .train import TrainConfig, train

EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ISOLATED_HOLE = 5

MASK_KINDS = ("central", "three_squares")


def _load_config_file(path, cls):
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"config file {path} has unknown fields: {sorted(unknown)}")
    return raw


def _build_config(cls, file_values, overrides):
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "z_clamp" in values and isinstance(values["z_clamp"], list):
        values["z_clamp"] = tuple(values["z_clamp"])
    return cls(**values)


def _write_resolved(out_dir, payload):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _resolve_mask(spec, size):
    if spec in MASK_KINDS:
        return data_io.make_mask(spec, size=size)
    mask = data_io.load_mask(spec)
    if mask.shape != (size, size):
        raise DataError(f"mask {spec} is {mask.shape}, image needs ({size}, {size})")
    return mask


def cmd_train(args):
    file_values = _load_config_file(args.config, TrainConfig)
    cfg = _build_config(
        TrainConfig,
        file_values,
        {
            "seed": args.seed,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
        },
    ).validate()
    dataset = data_io.load_dataset(args.data, size=64, augment_hflip=cfg.hflip_augment)
    resume = data_io.load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        generator, critic = build_from_checkpoint(resume)
        if generator.latent_dim != cfg.latent_dim:
            raise DataError(
                f"checkpoint latent dim {generator.latent_dim} != config {cfg.latent_dim}"
            )
    else:
        generator, critic = init_params(
            cfg.seed,
            latent_dim=cfg.latent_dim,
            base_channels=args.base_channels,
            critic_base_channels=args.critic_base_channels,
        )
    out_dir = Path(args.out)
    _write_resolved(out_dir, {"command": "train", "config": dataclasses.asdict(cfg),
                              "data": str(args.data), "resume": args.resume})
    (out_dir / "manifest.txt").write_text(dataset.manifest + "\n")
    train(cfg, dataset, generator, critic, out_dir=out_dir, resume=resume,
          checkpoint_every=args.checkpoint_every)
    return 0


def cmd_inpaint(args):
    file_values = _load_config_file(args.config, InpaintConfig)
    cfg = _build_config(
        InpaintConfig, file_values, {"restarts": args.restarts, "iterations": args.iterations}
    )
    ckpt = data_io.load_checkpoint(args.ckpt)
    generator, critic = build_from_checkpoint(ckpt)
    image = data_io.decode_image(args.image)
    size = generator.image_size
    if image.shape != (generator.out_channels, size, size):
        raise DataError(
            f"image {args.image} has shape {image.shape}, generator expects "
            f"({generator.out_channels}, {size}, {size})"
        )
    mask = _resolve_mask(args.mask, size)
    if args.blend == "poisson":
        # reject unsolvable masks before spending time on optimization
        _check_hole_connectivity(mask)

    out_dir = Path(args.out)
    _write_resolved(
        out_dir,
        {
            "command": "inpaint",
            "config": config_dict(cfg),
            "seed": args.seed,
            "blend": args.blend,
            "mask": args.mask,
            "checkpoint": str(args.ckpt),
            "image": str(args.image),
        },
    )
    result = find_closest_encoding(image, mask, generator, critic, cfg, seed=args.seed)
    with no_grad():
        g_img = generator(Tensor(result.z)).data
    blended = composite(image, mask, g_img, blend=args.blend)

    data_io.encode_image(g_img, out_dir / "generated.png")
    data_io.encode_image(blended, out_dir / "result.png")
    weights = compute_weight_map(mask, cfg.window)
    data_io.encode_image(weights * 2.0 - 1.0, out_dir / "weight_map.png")
    with open(out_dir / "trace.csv", "w", newline="") as f:
        f.write("restart,iteration,total_loss\n")
        for r, trace in enumerate(result.traces):
            for i, v in enumerate(trace):
                f.write(f"{r},{i + 1},{float(v)!r}\n")
    print(f"best restart {result.best_restart} loss {result.loss:.6f} -> {out_dir/'result.png'}")
    return 0


def cmd_eval(args):
    report, rows = metrics.evaluate_pair_set(args.results, args.truth, csv_path=args.out)
    print(f"images: {len(rows)}  mse: {report.mse:.4f}  psnr: {report.psnr:.4f}  "
          f"ssim: {report.ssim:.4f}")
    return 0


def cmd_generate(args):
    ckpt = data_io.load_checkpoint(args.ckpt)
    generator, _ = build_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    _write_resolved(out_dir, {"command": "generate", "count": args.count, "seed": args.seed,
                              "checkpoint": str(args.ckpt)})
    z = rng.standard_normal((args.count, generator.latent_dim))
    with no_grad():
        imgs = generator(Tensor(z)).data
    for i, img in enumerate(imgs):
        data_io.encode_image(img, out_dir / f"sample_{i:04d}.png")
    return 0


def cmd_mask(args):
    mask = data_io.make_mask(args.kind, size=args.size)
    data_io.save_mask(mask, args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latent-inpaint",
        description="Train a WGAN-GP, inpaint damaged images via latent optimization, "
        "and evaluate results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train generator and critic")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--checkpoint-every", type=int, default=1000, dest="checkpoint_every")
    p.add_argument("--base-channels", type=int, default=512, dest="base_channels",
                   help="generator channel width at the 4x4 stage")
    p.add_argument("--critic-base-channels", type=int, default=32, dest="critic_base_channels",
                   help="critic channel width at the 64x64 stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="fill the masked region of one image")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--image", required=True, help="damaged input image (PNG)")
    p.add_argument("--mask", required=True,
                   help="mask: 'central', 'three_squares', or a mask PNG path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with InpaintConfig fields")
    p.add_argument("--blend", choices=("overlay", "poisson"), default="poisson")
    p.add_argument("--restarts", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="MSE/PSNR/SSIM over matching file pairs")
    p.add_argument("--results", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="per-image CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("mask", help="write a named mask as PNG")
    p.add_argument("--kind", choices=MASK_KINDS, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IsolatedHoleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ISOLATED_HOLE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
