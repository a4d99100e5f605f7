"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 I/O, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as configs
from . import diagnostics, evaluation, pipeline, selftest, training
from .coder import ContainerError, DecodeError
from .core.serialize import WeightsFormatError
from .imageio import ImageFormatError, read_ppm, write_ppm
from .model import CodecModel

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_model(path: str) -> CodecModel:
    return CodecModel.load(path)


def _quality(model: CodecModel, text: str) -> float:
    try:
        q = float(text)
    except ValueError:
        raise UsageError(f"--q must be a decimal number, got {text!r}") from None
    if not np.isfinite(q) or not 0.0 <= q <= model.config.q_max:
        raise UsageError(f"--q {text} out of range: quality must lie in [0, {model.config.q_max}]")
    return q


def _load_config(text: str) -> configs.CodecConfig:
    if text in configs.PRESETS:
        return configs.PRESETS[text]()
    return configs.CodecConfig.from_json(Path(text).read_text())


# ---------------------------------------------------------------- commands

def cmd_encode(args) -> int:
    model = _load_model(args.model)
    q = _quality(model, args.q)
    image = read_ppm(args.input)
    res = pipeline.encode(model, image, q)
    Path(args.output).write_bytes(res.stream)
    print(f"bpp {res.bpp:.6f}  bytes {len(res.stream)}  q {res.q:g}")
    for s in sorted(res.scale_bits, reverse=True):
        print(f"scale {s}: {res.scale_bits[s]} bits (estimate {res.estimated_bits[s]:.1f})")
    print(f"header: {res.header_bits} bits")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    stream = Path(args.input).read_bytes()
    res = pipeline.decode(model, stream, use_lrp=not args.no_lrp, use_post=not args.no_post)
    write_ppm(args.output, res.image)
    h, w = res.image.shape[:2]
    print(f"decoded {w}x{h} at q {res.q:g}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        model, start = CodecModel.load_checkpoint(args.resume)
    else:
        model, start = CodecModel(_load_config(args.config), seed=args.seed), 0
    if args.synthetic:
        data = training.quantize_patches(
            training.synthetic_patches(args.num_patches, args.patch_size, args.seed))
    else:
        data = training.load_patch_folder(args.data_dir, args.patch_size, args.seed)
    out = Path(args.out_model)

    def log_step(k, st):
        if args.log_every and (k + 1) % args.log_every == 0:
            print(f"step {k + 1}  loss {st.loss:.4f}  rate {st.bpp:.4f} bpp  mse {st.mse:.3e}"
                  f"  lambda {st.lam:.4g}", flush=True)

    def save_checkpoint(step):
        path = Path(args.checkpoint) if args.checkpoint else out.with_suffix(out.suffix + ".ckpt")
        model.save(path, step=step, with_optimizer=True)

    try:
        res = training.train(model, data, args.steps, seed=args.seed, lr=args.lr,
                             batch_size=args.batch_size, start_step=start, log_every=0,
                             callback=log_step, checkpoint=save_checkpoint,
                             checkpoint_every=args.checkpoint_every)
    except training.TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    model.save(out, step=res.steps)
    print(f"wrote {out} after {res.steps} steps")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    qs = [_quality(model, t) for t in args.q]
    rows = evaluation.evaluate(model, args.data_dir, qs)
    with open(args.csv, "w", newline="") if args.csv else _stdout() as fh:
        evaluation.write_csv(fh, evaluation.EVAL_COLUMNS, (r.as_list() for r in rows))
    return EXIT_OK


def cmd_reencode(args) -> int:
    model = _load_model(args.model)
    q = _quality(model, args.q)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    steps = evaluation.reencode_loop(model, read_ppm(args.input), q, args.n)
    with open(args.csv, "w", newline="") if args.csv else _stdout() as fh:
        evaluation.write_csv(fh, evaluation.REENCODE_COLUMNS,
                             ([s.iteration, f"{s.bpp:.6f}", f"{s.psnr:.6f}"] for s in steps))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run(args.level, mutate_masks=args.mutate_masks)
    print(selftest.format_table(results))
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "SOME CHECKS FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_rf_map(args) -> int:
    grid = diagnostics.receptive_field_map(args.size)
    with open(args.output, "w", newline="") if args.output else _stdout() as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid:
            w.writerow([f"{v:g}" for v in row])
    return EXIT_OK


def cmd_params(args) -> int:
    model = CodecModel(_load_config(args.config))
    for key, value in model.parameter_breakdown().items():
        print(f"{key:<16} {value:>12,d}")
    return EXIT_OK


class _stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invcodec", description="Variable-rate invertible image codec.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="compress a P6 image")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--q", required=True, help="quality in [0, q_max], fractional values allowed")
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress to a P6 image")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--no-lrp", action="store_true", help="skip latent residual prediction")
    d.add_argument("--no-post", action="store_true", help="skip post-processing")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default="tiny", help="preset name (tiny, desk, full) or JSON file")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data-dir")
    src.add_argument("--synthetic", action="store_true")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=training.DEFAULT_LR)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--num-patches", type=int, default=8)
    t.add_argument("--patch-size", type=int, default=64)
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--checkpoint", help="checkpoint path (default: <out-model>.ckpt)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--out-model", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("evaluate", help="rate and PSNR over a folder of P6 images")
    v.add_argument("--model", required=True)
    v.add_argument("--data-dir", required=True)
    v.add_argument("--q", nargs="+", default=["0", "3", "6", "9", "11"])
    v.add_argument("--csv")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--level", choices=("fast", "full"), default="fast")
    s.add_argument("--mutate-masks", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    r = sub.add_parser("rf-map", help="receptive field of the spatial context stack as CSV")
    r.add_argument("--output")
    r.add_argument("--size", type=int, default=15)
    r.set_defaults(func=cmd_rf_map)

    x = sub.add_parser("reencode", help="repeated decode/encode trajectory")
    x.add_argument("--model", required=True)
    x.add_argument("--input", required=True)
    x.add_argument("--q", required=True)
    x.add_argument("--n", type=int, default=10)
    x.add_argument("--csv")
    x.set_defaults(func=cmd_reencode)

    c = sub.add_parser("params", help="parameter count of a configuration")
    c.add_argument("--config", default="full")
    c.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.resume and not (args.synthetic or args.data_dir):
        parser.error("train needs --synthetic or --data-dir")
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.ConfigMismatchError, pipeline.VerificationError, ContainerError, DecodeError) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, ImageFormatError, WeightsFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
