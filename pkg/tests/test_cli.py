import subprocess
import sys
import warnings

import numpy as np
import pytest
from PIL import Image

from msic.cli import EXIT_DATA, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from msic.codec import Codec
from msic.container import read_container
from msic.imageio import decode_png, encode_png, read_png
from msic.lossless import factorized_logprob
from msic.metrics import ms_ssim
from msic.rd import RdPoint, format_csv, parse_csv, render_svg

CONFIG = """\
# small model for tests
M=2
channels=2,3
depth=4
hidden_width=6
K=2
coder_width=4
updates=6
batch=2
crop=16
coder_updates=4
coder_batch=2
coder_crop=16
"""


def run(*argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("toy-corpus", "--out", root / "corpus", "--count", 4, "--size", 40) == EXIT_OK
    (root / "cfg.txt").write_text(CONFIG)
    assert run("train", "--stage", "ae", "--corpus", root / "corpus", "--config", root / "cfg.txt", "--out", root / "ae.mdl") == EXIT_OK
    assert (
        run(
            "train", "--stage", "coder", "--corpus", root / "corpus", "--config", root / "cfg.txt",
            "--ae-model", root / "ae.mdl", "--out", root / "full.mdl",
        )
        == EXIT_OK
    )
    return root


class TestTrain:
    def test_log_written(self, workspace):
        lines = (workspace / "ae.mdl.log.csv").read_text().splitlines()
        assert lines[0] == "update,loss,lr_scale" and len(lines) == 7

    def test_coder_without_ae(self, workspace, tmp_path):
        code = run("train", "--stage", "coder", "--corpus", workspace / "corpus", "--config", workspace / "cfg.txt", "--out", tmp_path / "x.mdl")
        assert code == EXIT_USAGE

    def test_coder_config_mismatch(self, workspace, tmp_path):
        (tmp_path / "other.txt").write_text(CONFIG.replace("channels=2,3", "channels=1,3"))
        code = run(
            "train", "--stage", "coder", "--corpus", workspace / "corpus", "--config", tmp_path / "other.txt",
            "--ae-model", workspace / "ae.mdl", "--out", tmp_path / "x.mdl",
        )
        assert code == EXIT_MISMATCH

    def test_resume_reproduces_trajectory(self, workspace, tmp_path):
        args = ["train", "--stage", "ae", "--corpus", workspace / "corpus", "--config", workspace / "cfg.txt"]
        assert run(*args, "--out", tmp_path / "part.mdl", "--stop-after", 3) == EXIT_OK
        assert run(*args, "--out", tmp_path / "resumed.mdl", "--resume", tmp_path / "part.mdl") == EXIT_OK
        assert (tmp_path / "resumed.mdl").read_bytes() == (workspace / "ae.mdl").read_bytes()

    def test_empty_corpus(self, workspace, tmp_path):
        (tmp_path / "empty").mkdir()
        code = run("train", "--stage", "ae", "--corpus", tmp_path / "empty", "--out", tmp_path / "x.mdl")
        assert code == EXIT_DATA

    def test_bad_config(self, workspace, tmp_path):
        (tmp_path / "bad.txt").write_text("K=3\n")
        code = run("train", "--stage", "ae", "--corpus", workspace / "corpus", "--config", tmp_path / "bad.txt", "--out", tmp_path / "x.mdl")
        assert code == EXIT_DATA


class TestCompress:
    def test_round_trip(self, workspace, tmp_path):
        src = workspace / "corpus" / "toy_0000.png"
        assert run("compress", src, "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic") == EXIT_OK
        assert run("decompress", tmp_path / "a.msic", "--model", workspace / "full.mdl", "--out", tmp_path / "a.png") == EXIT_OK
        assert run("decompress", tmp_path / "a.msic", "--model", workspace / "full.mdl", "--out", tmp_path / "b.png") == EXIT_OK
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        codec = Codec.from_bytes((workspace / "full.mdl").read_bytes())
        image = read_png(src)
        assert read_png(tmp_path / "a.png").tobytes() == decode_png(encode_png(codec.reconstruct(image))).tobytes()

    def test_rate_accounting(self, workspace, tmp_path):
        src = workspace / "corpus" / "toy_0001.png"
        run("compress", src, "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic")
        data = (tmp_path / "a.msic").read_bytes()
        codec = Codec.from_bytes((workspace / "full.mdl").read_bytes())
        _, levels = codec.features(read_png(src))
        ideal = factorized_logprob(levels, codec.coder, codec.hist, codec.schedule(*levels[0].shape[1:]))
        header_bits = 8 * read_container(data).header.size()
        assert ideal + header_bits - 1e-9 <= 8 * len(data) + 8 and 8 * len(data) <= ideal + header_bits + 32

    def test_drop_blocks(self, workspace, tmp_path):
        src = workspace / "corpus" / "toy_0002.png"
        run("compress", src, "--model", workspace / "full.mdl", "--out", tmp_path / "full.msic")
        assert run("compress", src, "--model", workspace / "full.mdl", "--out", tmp_path / "drop.msic", "--drop-blocks", 2) == EXIT_OK
        assert run("decompress", tmp_path / "drop.msic", "--model", workspace / "full.mdl", "--out", tmp_path / "d.png") == EXIT_OK
        assert (tmp_path / "drop.msic").stat().st_size >= (tmp_path / "full.msic").stat().st_size - 2

    def test_model_mismatch(self, workspace, tmp_path):
        run("compress", workspace / "corpus" / "toy_0000.png", "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic")
        other = Codec.from_bytes((workspace / "full.mdl").read_bytes())
        other.coder.steps[0].layers[0].bias.data[0] += 1.0
        (tmp_path / "other.mdl").write_bytes(other.to_bytes())
        assert run("decompress", tmp_path / "a.msic", "--model", tmp_path / "other.mdl", "--out", tmp_path / "x.png") == EXIT_MISMATCH

    def test_ae_model_cannot_compress(self, workspace, tmp_path):
        code = run("compress", workspace / "corpus" / "toy_0000.png", "--model", workspace / "ae.mdl", "--out", tmp_path / "a.msic")
        assert code == EXIT_MISMATCH

    def test_corrupt_container(self, workspace, tmp_path):
        (tmp_path / "bad.msic").write_bytes(b"MSIC garbage")
        assert run("decompress", tmp_path / "bad.msic", "--model", workspace / "full.mdl", "--out", tmp_path / "x.png") == EXIT_DATA

    def test_not_a_png(self, workspace, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image")
        assert run("compress", tmp_path / "x.png", "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic") == EXIT_DATA

    def test_alpha_rejected(self, workspace, tmp_path):
        Image.new("RGBA", (8, 8)).save(tmp_path / "rgba.png")
        assert run("compress", tmp_path / "rgba.png", "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic") == EXIT_DATA

    def test_grayscale_accepted(self, workspace, tmp_path):
        Image.fromarray(np.arange(64, dtype=np.uint8).reshape(8, 8), mode="L").save(tmp_path / "g.png")
        assert run("compress", tmp_path / "g.png", "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic") == EXIT_OK

    def test_missing_input(self, workspace, tmp_path):
        assert run("compress", tmp_path / "nope.png", "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic") == EXIT_DATA


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == EXIT_USAGE

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("compress", "--bogus")
        assert exc.value.code == EXIT_USAGE

    def test_console_script(self, workspace, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "msic.cli", "decompress"], capture_output=True, text=True)
        assert proc.returncode == EXIT_USAGE and "usage" in proc.stderr


class TestEval:
    def test_csv_and_consistency(self, workspace, tmp_path):
        assert run("eval", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--out", tmp_path / "e.csv", "--no-timing") == EXIT_OK
        text = (tmp_path / "e.csv").read_text()
        assert text.splitlines()[0] == "label,image,bpp,ms_ssim,enc_s,dec_s"
        rows = parse_csv(text, include_means=True)
        per_image, mean = rows[:-1], rows[-1]
        assert len(per_image) == 4 and mean.image == "mean"
        assert abs(mean.bpp - np.mean([r.bpp for r in per_image])) < 1e-12
        assert all(r.bpp > 0 and 0 <= r.ms_ssim <= 1 for r in per_image)
        # the score equals MS-SSIM between the PNG and the decompressed PNG
        src = workspace / "corpus" / "toy_0000.png"
        run("compress", src, "--model", workspace / "full.mdl", "--out", tmp_path / "a.msic")
        run("decompress", tmp_path / "a.msic", "--model", workspace / "full.mdl", "--out", tmp_path / "a.png")
        assert per_image[0].ms_ssim == ms_ssim(read_png(src), read_png(tmp_path / "a.png"))

    def test_rerun_identical(self, workspace, tmp_path):
        args = ["eval", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--no-timing"]
        run(*args, "--out", tmp_path / "a.csv")
        run(*args, "--out", tmp_path / "b.csv", "--jobs", 3)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_corpus(self, workspace, tmp_path):
        (tmp_path / "empty").mkdir()
        run("eval", "--corpus", tmp_path / "empty", "--model", workspace / "full.mdl", "--out", tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text() == "label,image,bpp,ms_ssim,enc_s,dec_s\n"

    def test_timing_recorded(self, workspace, tmp_path):
        run("eval", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--out", tmp_path / "e.csv")
        rows = parse_csv((tmp_path / "e.csv").read_text())
        assert all(r.enc_s > 0 and r.dec_s > 0 for r in rows)


class TestBench:
    def test_internal_only(self, workspace, tmp_path):
        with pytest.warns(UserWarning, match="not found"):
            code = main(
                [
                    "bench", "--corpus", str(workspace / "corpus"), "--model", str(workspace / "full.mdl"),
                    "--out", str(tmp_path / "b"), "--no-timing", "--jpeg-cmd", "no-such-encoder {in} {out} ;; no-such-decoder {out} {recon}",
                ]
            )
        assert code == EXIT_OK
        run("eval", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--out", tmp_path / "e.csv", "--no-timing")
        assert (tmp_path / "b" / "rd.csv").read_text() == (tmp_path / "e.csv").read_text()
        svg = (tmp_path / "b" / "rd.svg").read_text()
        assert svg.startswith("<svg") and "bits per pixel" in svg

    def test_external_template(self, workspace, tmp_path):
        # a lossless stand-in codec: copy the PNG through
        code = run(
            "bench", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--out", tmp_path / "b",
            "--no-timing", "--webp-cmd", "cp {in} {out} ;; cp {out} {recon}", "--qualities", "50,90",
        )
        assert code == EXIT_OK
        rows = parse_csv((tmp_path / "b" / "rd.csv").read_text())
        copies = [r for r in rows if r.label.startswith("webp")]
        assert len(copies) == 8 and all(r.ms_ssim == 1.0 for r in copies)
        assert {r.label for r in copies} == {"webp-q50", "webp-q90"}

    def test_svg_from_csv_identical(self, workspace, tmp_path):
        run("bench", "--corpus", workspace / "corpus", "--model", workspace / "full.mdl", "--out", tmp_path / "b", "--no-timing")
        text = (tmp_path / "b" / "rd.csv").read_text()
        assert render_svg(parse_csv(text)) == (tmp_path / "b" / "rd.svg").read_text()


def test_format_csv_repr_round_trip():
    points = [RdPoint("x", "a.png", 0.1 + 0.2, 1 / 3, 0.0, 0.0)]
    assert parse_csv(format_csv(points)) == points
