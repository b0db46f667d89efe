"""Command-line entry point.

Subcommands: synth-data, train, denoise, eval, uncertainty, ablate.
Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every run echoes
its resolved configuration and seed, and writes a resolved-config snapshot
next to its outputs so the run can be reproduced from the snapshot alone.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (ConfigError, TrainConfig, config_to_sections, dump_toml,
                     load_config)
from .data import (ManifestError, load_manifest, save_manifest, write_raster,
                   write_phantom_dataset, SliceEntry)
from .metrics import evaluate_dataset
from .trainer import Trainer, load_discriminator, load_generator
from .uncertainty import confidence_map, export_overlay


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


ABLATION_PRESETS = {
    # Component analysis: start from a plain classification critic and add
    # the decoder head, the mask regularization, and the gradient branch.
    "baseline": {"variant": "global", "cutmix": False, "gradient": False},
    "unet": {"variant": "unet", "cutmix": False, "gradient": False},
    "unet-cutmix": {"variant": "unet", "cutmix": True, "gradient": False},
    "full": {"variant": "unet", "cutmix": True, "gradient": True},
    # Critic architecture comparison.
    "disc-patch": {"variant": "patch", "cutmix": False, "gradient": False},
    "disc-global": {"variant": "global", "cutmix": False, "gradient": False},
    "disc-pixel": {"variant": "pixel", "cutmix": False, "gradient": False},
    "disc-unet": {"variant": "unet", "cutmix": False, "gradient": False},
    # Patch-size sweep (fine-tune from the next smaller size via --resume).
    "patch-64": {"patch_size": 64},
    "patch-128": {"patch_size": 128},
    "patch-256": {"patch_size": 256},
    "patch-512": {"patch_size": 512},
}


def build_parser():
    parser = _Parser(prog="ctdenoise",
                     description="adversarial low-dose CT denoising toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-level", type=float, default=0.1)
    p.add_argument("--streaks", type=int, default=4)
    p.set_defaults(func=cmd_synth_data)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help="run training" if name == "train"
                           else "run a named ablation configuration")
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--manifest", help="slice manifest (overrides [data])")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lambda-adv", type=float)
        p.add_argument("--lambda-img", type=float)
        p.add_argument("--lambda-grd", type=float)
        p.add_argument("--resume", help="continue from a checkpoint")
        if name == "ablate":
            p.add_argument("--preset", choices=sorted(ABLATION_PRESETS))
            p.add_argument("--variant", choices=("unet", "global", "patch", "pixel"))
            p.add_argument("--cutmix", action=argparse.BooleanOptionalAction,
                           default=None)
            p.add_argument("--gradient", action=argparse.BooleanOptionalAction,
                           default=None)
            p.add_argument("--unet-decoder", action=argparse.BooleanOptionalAction,
                           default=None)
            p.add_argument("--patch-size", type=int)
            p.add_argument("--dry-run", action="store_true",
                           help="resolve and echo the config without training")
        p.set_defaults(func=fn)

    p = sub.add_parser("denoise", help="apply a checkpoint to a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="metrics over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="omit to score raw LDCT (identity model)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uncertainty", help="export confidence-map overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=("denoised", "ldct", "ndct"),
                   default="denoised")
    p.set_defaults(func=cmd_uncertainty)

    return parser


def _echo_config(config):
    text = dump_toml(config_to_sections(config))
    print("resolved configuration:")
    print(text)
    print(f"seed = {config.seed}")


def _write_snapshot(out_dir, sections, created):
    path = Path(out_dir) / "resolved_config.toml"
    path.write_text(dump_toml(sections))
    created.append(path)
    return path


def _cleanup(created):
    for p in reversed(created):
        try:
            Path(p).unlink(missing_ok=True)
        except OSError:
            pass


def cmd_synth_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sections = {"synth": {
        "count": args.count, "size": args.size, "seed": args.seed,
        "noise_level": args.noise_level, "streaks": args.streaks,
    }}
    print("resolved configuration:")
    print(dump_toml(sections))
    print(f"seed = {args.seed}")
    created = []
    try:
        _write_snapshot(out, sections, created)
        manifest_path = write_phantom_dataset(out, args.count, args.size,
                                              args.seed, args.noise_level,
                                              args.streaks)
    except BaseException:
        _cleanup(created)
        raise
    print(f"wrote {args.count} pairs, manifest at {manifest_path}")
    return 0


def _resolve_train_config(args, ablation_args=False):
    config = TrainConfig()
    if args.config:
        config = load_config(args.config, base=config)
    if args.manifest:
        config.data.manifest = args.manifest
    if args.seed is not None:
        config.seed = args.seed
    if args.max_iterations is not None:
        config.max_iterations = args.max_iterations
    if args.batch_size is not None:
        config.batch_size = args.batch_size
    for attr, key in (("lambda_adv", "lambda_adv"), ("lambda_img", "lambda_img"),
                      ("lambda_grd", "lambda_grd")):
        value = getattr(args, attr)
        if value is not None:
            setattr(config.loss_weights, key, value)

    if ablation_args:
        preset = ABLATION_PRESETS[args.preset] if args.preset else {}
        variant = args.variant or preset.get("variant")
        if variant is not None:
            config.ablation.discriminator_variant = variant
        cutmix = args.cutmix if args.cutmix is not None else preset.get("cutmix")
        if cutmix is not None:
            config.ablation.use_cutmix = cutmix
        gradient = args.gradient if args.gradient is not None else preset.get("gradient")
        if gradient is not None:
            config.ablation.use_gradient_branch = gradient
        if args.unet_decoder is not None:
            config.ablation.use_unet_decoder = args.unet_decoder
        patch = args.patch_size or preset.get("patch_size")
        if patch is not None:
            config.patch_size = patch

    # A critic without a decoder path cannot honor the decoder flag.
    if config.ablation.discriminator_variant != "unet":
        config.ablation.use_unet_decoder = False

    config.validate()
    return config


def _run_training(args, config):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(config)

    if not config.data.manifest:
        raise ConfigError("no manifest given (use --manifest or [data] manifest)")
    manifest = load_manifest(config.data.manifest)

    created = []
    start_marker = set(out.glob("checkpoint_*.dugk"))
    try:
        _write_snapshot(out, config_to_sections(config), created)
        log_path = out / "train_log.jsonl"
        if args.resume:
            trainer = Trainer.from_checkpoint(args.resume, manifest=manifest,
                                              out_dir=out, log_path=log_path)
            trainer.config.max_iterations = config.max_iterations
        else:
            trainer = Trainer(config, manifest=manifest, out_dir=out,
                              log_path=log_path)
        trainer.train()
        final = out / "checkpoint_final.dugk"
        trainer.save(final)
    except BaseException:
        created.extend(p for p in out.glob("checkpoint_*.dugk")
                       if p not in start_marker)
        created.append(out / "train_log.jsonl")
        _cleanup(created)
        raise
    print(f"finished at iteration {trainer.iteration}; checkpoint at {final}")
    return 0


def cmd_train(args):
    return _run_training(args, _resolve_train_config(args))


def cmd_ablate(args):
    config = _resolve_train_config(args, ablation_args=True)
    if args.dry_run:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(config)
        _write_snapshot(out, config_to_sections(config), [])
        return 0
    return _run_training(args, config)


def cmd_denoise(args):
    manifest = load_manifest(args.manifest)
    generator = load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sections = {"denoise": {"checkpoint": str(args.checkpoint),
                            "manifest": str(args.manifest)}}
    print("resolved configuration:")
    print(dump_toml(sections))
    created = []
    try:
        _write_snapshot(out, sections, created)
        entries = []
        for i in range(len(manifest)):
            ld, nd = manifest.load_pair(i)
            with torch.no_grad():
                batch = torch.from_numpy(ld).unsqueeze(0).unsqueeze(0)
                den = generator(batch).clamp(0.0, 1.0).squeeze().numpy()
            den_path = out / f"denoised_{i:05d}.raw"
            nd_path = out / f"reference_{i:05d}.raw"
            write_raster(den_path, den)
            write_raster(nd_path, nd)
            created += [den_path, nd_path]
            entries.append(SliceEntry(den_path, nd_path, nd.shape[1], nd.shape[0]))
        manifest_path = out / "manifest.json"
        save_manifest(manifest_path, entries, (0.0, 1.0))
        created.append(manifest_path)
    except BaseException:
        _cleanup(created)
        raise
    print(f"wrote {len(entries)} denoised slices to {out}")
    return 0


def cmd_eval(args):
    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(args.checkpoint, manifest)
    label = "denoised" if args.checkpoint else "ldct"
    sections = {"eval": {"manifest": str(args.manifest),
                         "checkpoint": str(args.checkpoint or "identity")}}
    print("resolved configuration:")
    print(dump_toml(sections))
    print(report.to_table(label=label))
    print(f"slices: {report.count}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        created = []
        try:
            _write_snapshot(out, sections, created)
            metrics_path = out / "metrics.json"
            metrics_path.write_text(report.to_json())
            created.append(metrics_path)
        except BaseException:
            _cleanup(created)
            raise
    return 0


def cmd_uncertainty(args):
    manifest = load_manifest(args.manifest)
    critic = load_discriminator(args.checkpoint, domain="img")
    generator = load_generator(args.checkpoint) if args.source == "denoised" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sections = {"uncertainty": {"checkpoint": str(args.checkpoint),
                                "manifest": str(args.manifest),
                                "source": args.source}}
    print("resolved configuration:")
    print(dump_toml(sections))
    created = []
    try:
        _write_snapshot(out, sections, created)
        for i in range(len(manifest)):
            ld, nd = manifest.load_pair(i)
            if args.source == "ndct":
                img = nd
            elif args.source == "ldct":
                img = ld
            else:
                with torch.no_grad():
                    batch = torch.from_numpy(ld).unsqueeze(0).unsqueeze(0)
                    img = generator(batch).clamp(0.0, 1.0).squeeze().numpy()
            output = confidence_map(critic, img)
            png = out / f"overlay_{i:05d}.png"
            export_overlay(img, output, png)
            created += [png, png.with_suffix(".raw")]
    except BaseException:
        _cleanup(created)
        raise
    print(f"wrote {len(manifest)} overlays to {out}")
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
