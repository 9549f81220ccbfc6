"""Command-line front end.

Heavy imports happen inside command handlers so that thread limits taken
from XNET_THREADS can be exported to the BLAS environment variables before
numpy first loads; once numpy is up, those variables are ignored.

Exit codes: 0 success, 2 configuration problems, 3 data/checkpoint
problems, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICS = 4


def _configure_threads() -> None:
    n = os.environ.get("XNET_THREADS")
    if n is None:
        return
    if not n.isdigit() or int(n) < 1:
        raise SystemExit(f"XNET_THREADS must be a positive integer, got {n!r}")
    for var in _THREAD_VARS:
        os.environ[var] = n


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xnet", description="Unpaired image-to-image translation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("train", help="train a translator pair on trainA/trainB")
    p.add_argument("--data", type=Path, required=True, help="dataset root containing trainA/ and trainB/")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and logs")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="run images through a trained translator")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory of images")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--direction", choices=("a2b", "b2a"), default="a2b")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("ablate", help="train loss-term variants and compare by distribution distance")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--terms", required=True,
                   help="comma-separated variants, each a +-joined set from gan,id,ctc,zid,zcyc")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-fid", help="distribution distance between two image directories")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--fake", type=Path, required=True)
    p.add_argument("--extractor", default="pixels8", help="pixels8 or latent:<checkpoint>")
    p.add_argument("--out", type=Path, default=None, help="optional CSV report path")
    p.set_defaults(func=cmd_eval_fid)

    p = sub.add_parser("extract-fg", help="whiten near-white backgrounds, keep foreground pixels")
    p.add_argument("--input", type=Path, required=True, help="image file or directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=243.0, help="luma above this is background")
    p.set_defaults(func=cmd_extract_fg)

    p = sub.add_parser("viz-latent", help="render PCA and magnitude views of an image's latent code")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="a single image")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--direction", choices=("a2b", "b2a"), default="a2b",
                   help="which encoder to visualize")
    p.set_defaults(func=cmd_viz_latent)

    p = sub.add_parser("synth-data", help="generate a synthetic two-domain dataset")
    p.add_argument("--task", choices=("invert", "stripes", "segmentation"), required=True)
    p.add_argument("--count", type=int, default=64, help="images per domain")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    return parser


def _load_experiment_config(args):
    from .config import ConfigError, ExperimentConfig, apply_overrides, parse_config

    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"no such config file: {args.config}")
        cfg = parse_config(args.config.read_text())
    else:
        cfg = ExperimentConfig()
    return apply_overrides(cfg, args.overrides)


def _collect_image_paths(target: Path) -> list[Path]:
    from .data import DataError

    if target.is_file():
        return [target]
    if target.is_dir():
        paths = sorted(p for p in target.iterdir() if p.suffix.lower() in (".ppm", ".png"))
        if not paths:
            raise DataError(f"no .ppm or .png images in {target}")
        return paths
    raise DataError(f"no such file or directory: {target}")


def _read_stack(target: Path):
    import numpy as np

    from .data import DataError, read_image

    paths = _collect_image_paths(target)
    images = [read_image(p) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"{target}: images disagree in shape: {sorted(shapes)}")
    return np.stack(images), paths


def _fit_side(img, side: int):
    import numpy as np

    from .data import box_resample

    if img.shape[0] == side and img.shape[1] == side:
        return img
    return np.clip(np.rint(box_resample(img, side, side)), 0, 255).astype(np.uint8)


def _epoch_printer(total_epochs: int):
    state = {"epoch": None, "sum": 0.0, "n": 0}

    def flush():
        if state["n"]:
            mean = state["sum"] / state["n"]
            print(f"epoch {state['epoch'] + 1}/{total_epochs}  lr {state['lr']:.6g}  mean total {mean:.6g}")

    def sink(epoch, step, lr, report):
        if state["epoch"] != epoch:
            flush()
            state.update(epoch=epoch, sum=0.0, n=0)
        state.update(lr=lr, sum=state["sum"] + report.total, n=state["n"] + 1)

    sink.flush = flush
    return sink


def cmd_train(args) -> int:
    from .config import serialize_config
    from .data import load_domain
    from .training import train_loop

    cfg = _load_experiment_config(args)
    tc = cfg.to_train_config()
    ds_a = load_domain(args.data, "trainA", tc.image_side)
    ds_b = load_domain(args.data, "trainB", tc.image_side)
    args.out.mkdir(parents=True, exist_ok=True)
    resolved = serialize_config(cfg)
    (args.out / "config.txt").write_text(resolved)
    sink = _epoch_printer(tc.epochs)
    train_loop(tc, ds_a, ds_b, sink=sink, out_dir=args.out, config_text=resolved)
    sink.flush()
    print(f"final checkpoint: {args.out / 'final.xnet'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .data import from_batch, to_batch, write_image
    from .networks import translate_a2b, translate_b2a
    from .training import bundle_from_checkpoint, load_checkpoint

    bundle = bundle_from_checkpoint(load_checkpoint(args.ckpt), with_train_nets=False)
    side = bundle.spec.image_side
    go = translate_a2b if args.direction == "a2b" else translate_b2a
    args.out.mkdir(parents=True, exist_ok=True)
    from .data import read_image

    for path in _collect_image_paths(args.input):
        img = _fit_side(read_image(path), side)
        out_img = from_batch(go(bundle, to_batch([img])))[0]
        dest = args.out / path.name
        write_image(dest, out_img)
        print(f"{path} -> {dest}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    import dataclasses

    import numpy as np

    from .config import ConfigError, serialize_config
    from .data import from_batch, load_domain, to_batch
    from .evaluation import extract_features, fit_gaussian, frechet_distance, write_csv
    from .losses import TermFlags
    from .networks import translate_a2b
    from .training import train_loop

    from .losses import TERM_NAMES

    cfg = _load_experiment_config(args)
    variants = []
    for chunk in args.terms.split(","):
        tokens = tuple(t.strip() for t in chunk.split("+") if t.strip())
        if not tokens:
            raise ConfigError(f"empty variant in --terms {args.terms!r}")
        bad = [t for t in tokens if t not in TERM_NAMES]
        if bad:
            raise ConfigError(f"unknown loss terms {bad} (choose from {', '.join(TERM_NAMES)})")
        variants.append(tokens)

    tc_base = cfg.to_train_config()
    ds_a = load_domain(args.data, "trainA", tc_base.image_side)
    ds_b = load_domain(args.data, "trainB", tc_base.image_side)
    real_feats = extract_features(ds_b.images, "pixels8")
    real_stats = fit_gaussian(real_feats)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(serialize_config(cfg))

    rows = []
    for tokens in variants:
        name = "+".join(tokens)
        flags = TermFlags.only(*tokens)
        tc = dataclasses.replace(tc_base, flags=flags)
        run_dir = args.out / name
        print(f"[{name}] training {tc.epochs} epochs")
        bundle, _ = train_loop(tc, ds_a, ds_b, out_dir=run_dir, config_text=serialize_config(cfg))
        fakes = []
        for lo in range(0, len(ds_a.images), 16):
            y = translate_a2b(bundle, to_batch(ds_a.images[lo : lo + 16]))
            fakes.extend(from_batch(y))
        fid = frechet_distance(*fit_gaussian(extract_features(np.stack(fakes), "pixels8")), *real_stats)
        print(f"[{name}] fid {fid:.6g}")
        rows.append((name, fid))
    write_csv(args.out / "ablation.csv", ["variant", "fid"], rows)
    print(f"report: {args.out / 'ablation.csv'}")
    return EXIT_OK


def cmd_eval_fid(args) -> int:
    from .evaluation import fid_between, write_csv

    real, _ = _read_stack(args.real)
    fake, _ = _read_stack(args.fake)
    fid = fid_between(real, fake, args.extractor)
    print(f"fid {fid:.9g}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, ["real", "fake", "extractor", "fid"],
                  [(args.real, args.fake, args.extractor, fid)])
    return EXIT_OK


def cmd_extract_fg(args) -> int:
    from .data import read_image, write_image
    from .evaluation import foreground_extract

    args.out.mkdir(parents=True, exist_ok=True)
    for path in _collect_image_paths(args.input):
        out_img = foreground_extract(read_image(path), args.threshold)
        dest = args.out / path.name
        write_image(dest, out_img)
        print(f"{path} -> {dest}")
    return EXIT_OK


def cmd_viz_latent(args) -> int:
    from .data import encode_pgm, read_image, write_image
    from .evaluation import latent_views
    from .training import bundle_from_checkpoint, load_checkpoint

    bundle = bundle_from_checkpoint(load_checkpoint(args.ckpt), with_train_nets=False)
    encoder = bundle.enc_a2b if args.direction == "a2b" else bundle.enc_b2a
    img = _fit_side(read_image(args.input), bundle.spec.image_side)
    rgb, mag = latent_views(encoder, img)
    args.out.mkdir(parents=True, exist_ok=True)
    pca_path = args.out / "latent_pca.ppm"
    mag_path = args.out / "latent_magnitude.pgm"
    write_image(pca_path, rgb)
    mag_path.write_bytes(encode_pgm(mag))
    print(f"wrote {pca_path} and {mag_path}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .data import SynthSpec, synth_write

    spec = SynthSpec(task=args.task, count=args.count, side=args.side, seed=args.seed)
    synth_write(args.out, spec)
    print(f"wrote {args.count} image pairs under {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    _configure_threads()
    parser = _build_parser()
    args = parser.parse_args(argv)
    from .config import ConfigError
    from .data import DataError
    from .training import CheckpointError, NumericsError

    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
