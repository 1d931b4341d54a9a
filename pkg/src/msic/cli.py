"""Command-line interface: ``msic {train,compress,decompress,eval,bench,toy-corpus}``.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

from .blob import FormatError, parse_header
from .codec import Codec, ModelMismatchError, parse_config, train_ae_stage, train_coder_stage
from .imageio import decode_png, list_pngs, write_png
from .lossless import ScheduleError
from .metrics import bpp
from .rangecoder import CorruptStreamError
from .tensor import ConfigurationError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3
AE_KEYS = ("M", "channels", "N", "u", "alpha", "hidden_width", "depth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_model(path) -> Codec:
    return Codec.from_bytes(Path(path).read_bytes())


def _write_log(path: Path, log) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("update", "loss", "lr_scale"))
        for u, loss, scale in zip(log.updates, log.loss, log.lr_scale):
            writer.writerow((u, repr(loss), repr(scale)))


def cmd_train(args) -> int:
    values = parse_header(Path(args.config).read_text()) if args.config else {}
    config, ae_schedule, coder_schedule = parse_config(values, args.seed)
    images = [decode_png(p.read_bytes()) for p in list_pngs(args.corpus)]
    if not images:
        raise FormatError(f"no PNG images in {args.corpus}")
    out = Path(args.out)
    resume = _load_model(args.resume) if args.resume else None
    if args.stage == "ae":
        codec, log = train_ae_stage(images, config, ae_schedule, resume, stop=args.stop_after)
    else:
        ae_path = args.ae_model or (out if out.exists() else None)
        if resume is None and ae_path is None:
            raise UsageError("the coder stage needs a trained autoencoder (--ae-model); train --stage ae first")
        base = resume or _load_model(ae_path)
        if args.config:
            if any(getattr(config, k) != getattr(base.config, k) for k in AE_KEYS):
                raise ModelMismatchError("config file disagrees with the autoencoder model")
            base.config = replace(base.config, K=config.K, coder_width=config.coder_width)
        codec, log = train_coder_stage(base, images, coder_schedule, resume, stop=args.stop_after)
    out.write_bytes(codec.to_bytes())
    _write_log(Path(args.log) if args.log else out.with_name(out.name + ".log.csv"), log)
    print(f"wrote {out} ({codec.stage} model, {len(log.updates)} updates, final loss {log.loss[-1] if log.loss else float('nan'):.4f})")
    return EXIT_OK


def cmd_compress(args) -> int:
    codec = _load_model(args.model)
    t0 = time.perf_counter()
    image = decode_png(Path(args.input).read_bytes())
    data = codec.compress(image, args.drop_blocks)
    Path(args.out).write_bytes(data)
    elapsed = time.perf_counter() - t0
    _, h, w = image.shape
    print(f"{args.out}: {len(data)} bytes, {bpp(len(data), w, h):.4f} bpp, {elapsed:.3f} s")
    return EXIT_OK


def cmd_decompress(args) -> int:
    codec = _load_model(args.model)
    t0 = time.perf_counter()
    image = codec.decompress(Path(args.input).read_bytes())
    write_png(args.out, image)
    print(f"{args.out}: {image.shape[2]}x{image.shape[1]}, {time.perf_counter() - t0:.3f} s")
    return EXIT_OK


def _internal_points(args):
    from .rd import evaluate_image

    codec = _load_model(args.model)
    paths = list_pngs(args.corpus)
    label = args.label or "msic"

    def one(p):
        return evaluate_image(codec, p, label, args.drop_blocks, not args.no_timing)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.jobs) as pool:
            return list(pool.map(one, paths)), paths
    return [one(p) for p in paths], paths


def cmd_eval(args) -> int:
    from .rd import format_csv

    points, _ = _internal_points(args)
    Path(args.out).write_text(format_csv(points))
    print(f"wrote {args.out} ({len(points)} images)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .rd import ExternalCodec, format_csv, render_svg, run_external

    points, paths = _internal_points(args)
    externals = [
        ExternalCodec(name, template)
        for name, template in (("jpeg", args.jpeg_cmd), ("webp", args.webp_cmd), ("bpg", args.bpg_cmd))
        if template
    ]
    qualities = [int(q) for q in args.qualities.split(",") if q.strip()]
    points += run_external(externals, paths, qualities, not args.no_timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rd.csv").write_text(format_csv(points))
    (out / "rd.svg").write_text(render_svg(points))
    print(f"wrote {out / 'rd.csv'} and {out / 'rd.svg'} ({len(points)} points)")
    return EXIT_OK


def cmd_toy_corpus(args) -> int:
    from .toydata import toy_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(toy_corpus(args.count, args.size, args.size, args.seed)):
        write_png(out / f"toy_{i:04d}.png", img)
    print(f"wrote {args.count} images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msic", description="Multi-scale learned image codec")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the autoencoder or the lossless coder")
    p.add_argument("--stage", choices=("ae", "coder"), required=True)
    p.add_argument("--corpus", required=True, help="directory of PNG images")
    p.add_argument("--config", help="key=value config file (defaults to the toy preset)")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--ae-model", help="trained autoencoder for --stage coder (default: --out if it exists)")
    p.add_argument("--resume", help="continue training from this checkpoint")
    p.add_argument("--log", help="training log CSV (default: OUT.log.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-after", type=int, help="end after this update (resume later with --resume)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="PNG -> .msic")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop-blocks", type=int, default=0)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help=".msic -> PNG")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    for name, func, helptext in (("eval", cmd_eval, "per-image RD points as CSV"), ("bench", cmd_bench, "RD comparison with external codecs")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--corpus", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--out", required=True, help="CSV path" if name == "eval" else "output directory")
        p.add_argument("--drop-blocks", type=int, default=0)
        p.add_argument("--label", default=None)
        p.add_argument("--no-timing", action="store_true", help="write 0 for timings so reruns are byte-identical")
        p.add_argument("--jobs", type=int, default=1)
        if name == "bench":
            p.add_argument("--jpeg-cmd")
            p.add_argument("--webp-cmd")
            p.add_argument("--bpg-cmd")
            p.add_argument("--qualities", default="10,30,50,70,90")
        p.set_defaults(func=func)

    p = sub.add_parser("toy-corpus", help="write procedurally generated PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"msic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelMismatchError as exc:
        print(f"msic: model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, CorruptStreamError, ScheduleError, ConfigurationError, OSError, ValueError) as exc:
        print(f"msic: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
