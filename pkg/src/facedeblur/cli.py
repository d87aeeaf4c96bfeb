"""Command-line entry point: ``facedeblur <command> [options]``.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .blur import KERNEL_SIZES, DegradationConfig, generate_kernel_archive
from .config import PROFILES, RunConfig, load_config
from .dataset import FaceDataset, build_manifest, load_image, render_blurred, save_image, write_manifest
from .synthetic import write_synthetic_faces

logger = logging.getLogger("facedeblur")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` unless the help text already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS, False):
            return text
        return super()._get_help_string(action)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommands repeat the global flags so they may follow the command name;
    # SUPPRESS keeps an omitted flag from clobbering one given earlier.
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None),
                        help=f"run seed (default: from the config, else {RunConfig().seed})")
    parser.add_argument("--profile", choices=PROFILES, default=default(None),
                        help="hyper-parameter profile (default: from the config, else paper)")
    parser.add_argument("--config", type=Path, default=default(None), metavar="FILE",
                        help="JSON file overriding profile values (default: none)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False),
                        help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="facedeblur", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("kernel-gen", help="write random motion-blur kernels", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--sizes", type=_int_list, default=KERNEL_SIZES, help="comma-separated odd kernel sizes")
    p.add_argument("--per-size", type=int, default=100, help="kernels per size")

    p = sub.add_parser("faces-gen", help="write synthetic faces with parsing labels", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("--out", type=Path, required=True, help="output directory (gets clear/ and labels/)")
    p.add_argument("--count", type=int, default=8, help="number of faces")
    p.add_argument("--size", type=int, default=None, help="image size (default: the profile's image_size)")

    p = sub.add_parser("dataset-gen", help="build a manifest and render blurred images", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("--clear", type=Path, required=True, help="directory of clear face images")
    p.add_argument("--labels", type=Path, required=True, help="directory of label maps (same stems, .png)")
    p.add_argument("--kernels", type=Path, required=True, help="kernel archive from kernel-gen")
    p.add_argument("--out", type=Path, required=True, help="dataset root; gets manifest.jsonl and blurred/")
    p.add_argument("--split", choices=("train", "test"), default="train", help="split name")
    p.add_argument("--exclude-kernels", type=Path, default=None,
                   help="kernel archive of the other split, must be disjoint from --kernels (default: no check)")
    p.add_argument("--sigma", type=float, default=None,
                   help=f"noise std on the [0,1] scale (default: {DegradationConfig().noise_sigma})")
    p.add_argument("--boundary", choices=("replicate", "reflect"), default=None,
                   help=f"convolution boundary mode (default: {DegradationConfig().boundary_mode})")
    p.add_argument("--no-render", action="store_true", help="write the manifest only")

    p = sub.add_parser("train", help="run the progressive training schedule", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("--manifest", type=Path, default=None, help="training manifest from dataset-gen (default: none)")
    p.add_argument("--synthetic", type=int, default=None, metavar="N",
                   help="train on N in-memory synthetic faces instead of a manifest (default: off)")
    p.add_argument("--out", type=Path, required=True, help="run directory for metrics and checkpoints")
    p.add_argument("--stage", choices=("1", "2", "3", "4", "all"), default="all", help="stage(s) to run")
    p.add_argument("--resume", type=Path, default=None, metavar="CKPT", help="continue from a checkpoint (default: fresh start)")
    p.add_argument("--scale-factor", type=float, default=None,
                   help="multiplier on the per-stage iteration counts (default: the profile's scale_factor)")

    p = sub.add_parser("eval", help="PSNR/SSIM report on a manifest", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("--manifest", type=Path, required=True, help="test manifest from dataset-gen")
    p.add_argument("--ckpt", type=Path, default=None, help="checkpoint (default: none, scores the blurred inputs)")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--max-grids", type=int, default=16, help="number of comparison grids to write")

    p = sub.add_parser("infer", help="deblur one image", formatter_class=fmt)
    _global_options(p, suppress=True)
    p.add_argument("input", type=Path, help="blurred input image")
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output PNG")
    p.add_argument("--dump-parsing", type=Path, default=None, metavar="PNG",
                   help="also write the colorized argmax parsing map (default: off)")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, profile=args.profile, **overrides)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {path}")


def cmd_kernel_gen(args) -> int:
    cfg = _run_config(args)
    bad = [s for s in args.sizes if s < 3 or s % 2 == 0]
    if bad or not args.sizes:
        raise UsageError(f"kernel sizes must be odd and >= 3, got {list(args.sizes)}")
    if args.per_size < 1:
        raise UsageError("--per-size must be positive")
    paths = generate_kernel_archive(args.out, args.sizes, args.per_size, cfg.seed)
    print(f"wrote {len(paths)} kernels to {args.out}")
    return EXIT_OK


def cmd_faces_gen(args) -> int:
    cfg = _run_config(args)
    size = args.size or cfg.image_size
    if args.count < 1 or size < 16:
        raise UsageError("--count must be positive and --size at least 16")
    write_synthetic_faces(args.out, args.count, size, cfg.seed)
    print(f"wrote {args.count} faces to {args.out}")
    return EXIT_OK


def cmd_dataset_gen(args) -> int:
    cfg = _run_config(args)
    _require_dir(args.clear, "clear image")
    _require_dir(args.labels, "label")
    _require_dir(args.kernels, "kernel")
    deg = cfg.degradation
    deg = DegradationConfig(
        noise_sigma=deg.noise_sigma if args.sigma is None else args.sigma,
        boundary_mode=args.boundary or deg.boundary_mode,
        rng_seed=cfg.seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    entries = build_manifest(
        args.clear, args.labels, args.kernels, deg, args.split,
        root=args.out, exclude_kernel_dir=args.exclude_kernels,
    )
    write_manifest(args.out / "manifest.jsonl", entries)
    if not args.no_render:
        render_blurred(entries, args.out)
    print(f"wrote {len(entries)} entries to {args.out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .synthetic import micro_dataset
    from .training import run_full_schedule

    cfg = _run_config(args)
    if args.scale_factor is not None:
        if args.scale_factor <= 0:
            raise UsageError("--scale-factor must be positive")
        cfg = replace(cfg, scale_factor=args.scale_factor)
    if (args.manifest is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --manifest or --synthetic")
    if args.manifest is not None:
        if not args.manifest.exists():
            raise FileNotFoundError(f"manifest not found: {args.manifest}")
        augment = cfg.augment if cfg.use_augment else None
        dataset = FaceDataset.from_manifest(args.manifest, augment_cfg=augment, seed=cfg.seed)
    else:
        dataset = micro_dataset(args.synthetic, cfg.image_size, cfg.kernel_sizes, cfg.seed,
                                cfg.degradation.noise_sigma)
    stages = (1, 2, 3, 4) if args.stage == "all" else (int(args.stage),)
    _, written = run_full_schedule(cfg, dataset, args.out, stages=stages, resume=args.resume)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .evaluation import benchmark_report, model_restorer

    if not args.manifest.exists():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    if args.ckpt is None:
        restore, method = (lambda img: img), "blurred"
    else:
        model, _ = load_model(args.ckpt)
        restore, method = model_restorer(model), args.ckpt.stem
    report = benchmark_report(args.manifest, restore, args.out, method=method, max_grids=args.max_grids)
    print(json.dumps(report.aggregates()["overall"], sort_keys=True))
    return EXIT_OK


def colorize_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Label map -> H x W x 3 image with a fixed distinct color per class."""
    hues = (np.arange(num_classes) * 0.618034) % 1.0
    palette = np.stack([0.5 + 0.5 * np.cos(2 * np.pi * (hues + off)) for off in (0.0, 1 / 3, 2 / 3)], axis=1)
    palette[0] = 0.0
    return palette[labels]


def cmd_infer(args) -> int:
    from .checkpoint import load_model

    if not args.input.exists():
        raise FileNotFoundError(f"input image not found: {args.input}")
    model, cfg = load_model(args.ckpt)
    img = load_image(args.input)
    h, w = img.shape[:2]
    x = torch.as_tensor(img, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
    x = F.pad(x, (0, w % 2, 0, h % 2), mode="reflect") if (h % 2 or w % 2) else x
    with torch.no_grad():
        out = model(x)
    y = out["y"].clamp(0.0, 1.0)[0, :, :h, :w].permute(1, 2, 0).double().numpy()
    save_image(args.out, y)
    print(args.out)
    if args.dump_parsing is not None:
        labels = out["p"][0, :, :h, :w].argmax(dim=0).numpy()
        save_image(args.dump_parsing, colorize_labels(labels, cfg.schema.num_classes))
        print(args.dump_parsing)
    return EXIT_OK


COMMANDS = {
    "kernel-gen": cmd_kernel_gen,
    "faces-gen": cmd_faces_gen,
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"facedeblur {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit status
        logger.debug("command failed", exc_info=True)
        print(f"facedeblur {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
