"""
Command-line front end.

    o2m degrade --quality N --in PATH --out PATH [--dump-dct PATH]
    o2m train   --config PATH
    o2m infer   --ckpt PATH --in PATH --samples N --seed S --out-prefix P
    o2m eval    --ref PATH --test PATH --csv PATH [--quality Q] [--approach TAG]
    o2m check   --gradients | --deconv-demo --out PATH

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ImageDecodeError, NonFiniteError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("o2m")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this contract reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _workers() -> int:
    raw = os.environ.get("O2M_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"O2M_THREADS must be an integer, got {raw!r}") from None


# -- subcommands -----------------------------------------------------------------
def cmd_degrade(args) -> int:
    from .data import load_image, save_image
    from .jpeg import jpeg_degrade, save_dct_grid

    if not 1 <= args.quality <= 100:
        raise UsageError(f"--quality must be in [1, 100], got {args.quality}")
    image = load_image(args.inp)
    degraded, grid, _ = jpeg_degrade(image, args.quality)
    save_image(degraded, _png(args.out))
    if args.dump_dct:
        save_dct_grid(args.dump_dct, grid, args.quality)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_config, train

    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{args.config}: config file not found") from exc
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    if cfg.out_dir is None:
        raise UsageError(f"{args.config}: out_dir must be set")
    result = train(cfg)
    last = result.reports[-1]
    print(f"trained {len(result.reports)} iterations; final l_total={last.l_total:.6g}")
    print(f"log: {result.log_path}")
    for path in result.checkpoints:
        print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import load_image, save_image
    from .training import infer, load_proposal

    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    net = load_proposal(args.ckpt)
    image = load_image(args.inp)
    for k, out in enumerate(infer(net, image, args.samples, args.seed), 1):
        path = Path(f"{args.out_prefix}{k}.png")
        save_image(out, path)
        print(path)
    return EXIT_OK


def _pairs(ref: Path, test: Path) -> list[tuple[str, Path, Path]]:
    from .data import list_images

    if test.is_dir():
        refs = {p.stem: p for p in list_images(ref)} if ref.is_dir() else {}
        pairs = []
        for t in list_images(test):
            if t.stem not in refs:
                raise FileNotFoundError(f"{ref / t.name}: no reference image for {t}")
            pairs.append((t.stem, refs[t.stem], t))
        if not pairs:
            raise FileNotFoundError(f"{test}: no test images")
        return pairs
    if ref.is_dir():
        raise UsageError("--ref is a directory but --test is a single file")
    return [(test.stem, ref, test)]


def cmd_eval(args) -> int:
    from .data import load_image
    from .metrics import append_csv, evaluate

    pairs = _pairs(Path(args.ref), Path(args.test))

    def score(item):
        name, r, t = item
        return evaluate(load_image(r), load_image(t), image=name, quality=args.quality, approach=args.approach)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        rows = list(pool.map(score, pairs))  # map keeps input order
    append_csv(args.csv, rows)
    for row in rows:
        print(f"{row.image}: psnr={row.psnr:.4f} ssim={row.ssim:.6f} psnrb={row.psnrb:.4f}")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.gradients:
        from .gradsuite import TOLERANCE, run_gradient_suite

        def show(res):
            print(f"{res.name:<34} max rel err {res.max_error:.3e}  {'ok' if res.ok else 'FAIL'}", flush=True)

        results = run_gradient_suite(progress=show)
        failed = [r for r in results if not r.ok]
        if failed:
            print(f"{len(failed)} check(s) exceed {TOLERANCE:g}", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK
    if not args.out:
        raise UsageError("--deconv-demo needs --out PATH")
    from .data import ImageBuffer, save_image
    from .nn import deconv_demo

    plain, averaged = deconv_demo(seed=args.seed)
    lo, hi = plain.min(), plain.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0

    def to_pixels(a):
        return np.clip(np.floor((a - lo) * scale + 0.5), 0, 255).astype(np.uint8)

    side = np.concatenate([to_pixels(plain), to_pixels(averaged)], axis=1)
    side = np.kron(side, np.ones((8, 8), dtype=np.uint8))  # enlarge each sample to 8x8
    save_image(ImageBuffer(side), _png(args.out))
    print(f"plain variance {plain.var():.3e}; shift-and-average variance {averaged.var():.3e}")
    return EXIT_OK


def _png(path) -> Path:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise UsageError(f"{path}: output images are written as PNG; use a .png name")
    return path


# -- wiring ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="o2m", description="JPEG artifact removal with a one-to-many generative network.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="simulate JPEG compression")
    p.add_argument("--quality", type=int, required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-dct", help="also write the quantized coefficients")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train F and D from a key = value config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sample reconstructions from a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="append PSNR / SSIM / PSNR-B rows to a CSV")
    p.add_argument("--ref", required=True, help="reference image or directory")
    p.add_argument("--test", required=True, help="test image or directory (matched by file stem)")
    p.add_argument("--csv", required=True)
    p.add_argument("--quality", default="")
    p.add_argument("--approach", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="gradient suite or deconvolution demo")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--gradients", action="store_true")
    mode.add_argument("--deconv-demo", action="store_true")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"o2m: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageDecodeError, CheckpointError, ShapeError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"o2m: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"o2m: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
