"""Rate-distortion evaluation, external codec comparison and SVG plots."""

from __future__ import annotations

import csv
import io
import shlex
import shutil
import subprocess
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .codec import Codec
from .imageio import decode_png, encode_png
from .metrics import bpp, ms_ssim

CSV_FIELDS = ("label", "image", "bpp", "ms_ssim", "enc_s", "dec_s")


@dataclass(frozen=True)
class RdPoint:
    label: str
    image: str
    bpp: float
    ms_ssim: float
    enc_s: float = 0.0
    dec_s: float = 0.0


def evaluate_image(codec: Codec, path: Path, label: str = "msic", drop: int = 0, timing: bool = True) -> RdPoint:
    """Compress and decompress one PNG, timing PNG decode through PNG encode."""
    t0 = time.perf_counter()
    image = decode_png(path.read_bytes())
    container = codec.compress(image, drop)
    t1 = time.perf_counter()
    png = encode_png(codec.decompress(container))
    t2 = time.perf_counter()
    reconstruction = decode_png(png)
    _, h, w = image.shape
    enc, dec = (t1 - t0, t2 - t1) if timing else (0.0, 0.0)
    return RdPoint(label, path.name, bpp(len(container), w, h), ms_ssim(image, reconstruction), enc, dec)


def mean_rows(points: Sequence[RdPoint]) -> list[RdPoint]:
    rows = []
    for label in dict.fromkeys(p.label for p in points):
        group = [p for p in points if p.label == label]
        rows.append(
            RdPoint(
                label,
                "mean",
                float(np.mean([p.bpp for p in group])),
                float(np.mean([p.ms_ssim for p in group])),
                float(np.mean([p.enc_s for p in group])),
                float(np.mean([p.dec_s for p in group])),
            )
        )
    return rows


def format_csv(points: Sequence[RdPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for p in list(points) + mean_rows(points):
        writer.writerow([p.label, p.image, repr(p.bpp), repr(p.ms_ssim), repr(p.enc_s), repr(p.dec_s)])
    return buf.getvalue()


def parse_csv(text: str, include_means: bool = False) -> list[RdPoint]:
    """Rows of a CSV written by ``format_csv``; the aggregate rows are skipped by default."""
    reader = csv.DictReader(io.StringIO(text))
    return [
        RdPoint(r["label"], r["image"], float(r["bpp"]), float(r["ms_ssim"]), float(r["enc_s"]), float(r["dec_s"]))
        for r in reader
        if include_means or r["image"] != "mean"
    ]


# ---------------------------------------------------------------------------
# external codecs


@dataclass(frozen=True)
class ExternalCodec:
    """Shell-free command templates.

    ``template`` is ``"<encode> ;; <decode>"``. The encode command sees
    ``{in}`` (source PNG), ``{out}`` (compressed file) and ``{q}``; the decode
    command sees ``{out}`` and ``{recon}`` (reconstructed image to write).
    """

    name: str
    template: str

    def commands(self) -> tuple[list[str], list[str]]:
        enc, sep, dec = self.template.partition(";;")
        if not sep or not enc.strip() or not dec.strip():
            raise ValueError(f"{self.name} template must be '<encode cmd> ;; <decode cmd>'")
        return shlex.split(enc), shlex.split(dec)

    def available(self) -> bool:
        enc, dec = self.commands()
        return shutil.which(enc[0]) is not None and shutil.which(dec[0]) is not None

    def run(self, path: Path, quality: int, timing: bool = True) -> RdPoint:
        enc, dec = self.commands()
        original = decode_png(path.read_bytes())
        with tempfile.TemporaryDirectory() as tmp:
            values = {"in": str(path), "out": str(Path(tmp) / "coded.bin"), "recon": str(Path(tmp) / "recon.png"), "q": str(quality)}
            t0 = time.perf_counter()
            subprocess.run([a.format(**values) for a in enc], check=True, capture_output=True)
            t1 = time.perf_counter()
            subprocess.run([a.format(**values) for a in dec], check=True, capture_output=True)
            t2 = time.perf_counter()
            size = Path(values["out"]).stat().st_size
            with Image.open(values["recon"]) as im:
                recon = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        _, h, w = original.shape
        enc_s, dec_s = (t1 - t0, t2 - t1) if timing else (0.0, 0.0)
        return RdPoint(f"{self.name}-q{quality}", path.name, bpp(size, w, h), ms_ssim(original, recon), enc_s, dec_s)


def run_external(codecs: Iterable[ExternalCodec], paths: Sequence[Path], qualities: Sequence[int], timing: bool = True) -> list[RdPoint]:
    points = []
    for codec in codecs:
        if not codec.available():
            warnings.warn(f"{codec.name}: codec binaries not found, skipping")
            continue
        for q in qualities:
            points += [codec.run(p, q, timing) for p in paths]
    return points


# ---------------------------------------------------------------------------
# plotting

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _family(label: str) -> str:
    return label.rsplit("-q", 1)[0] if "-q" in label else label


def render_svg(points: Sequence[RdPoint], width: int = 640, height: int = 480) -> str:
    """Mean bpp (x) against mean MS-SSIM (y), one polyline per codec family."""
    means = mean_rows(points)
    left, right, top, bottom = 60, 20, 20, 50
    xs = [p.bpp for p in means] or [0.0, 1.0]
    ys = [p.ms_ssim for p in means] or [0.0, 1.0]
    x0, x1 = 0.0, max(xs) * 1.05 or 1.0
    y0, y1 = min(ys) - 0.02, min(1.0, max(ys) + 0.02)
    if y1 <= y0:
        y0, y1 = y0 - 0.05, y0 + 0.05

    def px(v: float) -> float:
        return left + (v - x0) / (x1 - x0) * (width - left - right)

    def py(v: float) -> float:
        return height - bottom - (v - y0) / (y1 - y0) * (height - top - bottom)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{(width + left) / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">bits per pixel</text>',
        f'<text x="14" y="{(height - bottom + top) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(height - bottom + top) / 2:.1f})">MS-SSIM</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(xv):.1f}" y="{height - bottom + 16}" text-anchor="middle" font-size="10">{xv:.3f}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.3f}</text>')
    families = list(dict.fromkeys(_family(p.label) for p in means))
    for i, fam in enumerate(families):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = sorted((p.bpp, p.ms_ssim) for p in means if _family(p.label) == fam)
        coords = " ".join(f"{px(b):.2f},{py(s):.2f}" for b, s in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        for b, s in pts:
            out.append(f'<circle cx="{px(b):.2f}" cy="{py(s):.2f}" r="3" fill="{colour}"/>')
        out.append(f'<text x="{width - right - 4}" y="{top + 14 * (i + 1)}" text-anchor="end" font-size="11" fill="{colour}">{fam}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
