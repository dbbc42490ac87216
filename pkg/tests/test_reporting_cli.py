"""Report formatting, figures, benchmark sweeps, and the command line."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pgblind.bench import (
    ABLATION_AXES,
    bench_estimation,
    resolve_levels,
    run_ablation,
    save_estimation_report,
    toy_clean_images,
    write_toy_dataset,
)
from pgblind.cli import main
from pgblind.reporting import (
    SATURATED,
    BenchReport,
    format_cell,
    render_bar_figure,
    render_training_curves,
)
from pgblind.tensor_core import load_image
from pgblind.trainer import TrainConfig

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class TestFormatCell:
    def test_cases(self):
        assert format_cell(None) == SATURATED
        assert format_cell(0.123456789) == "0.123457"
        assert format_cell(3) == "3"
        assert format_cell(True) == "true"
        assert format_cell(False) == "false"
        assert format_cell("txt") == "txt"
        assert format_cell(1e-7) == "1e-07"


class TestBenchReport:
    def _report(self):
        r = BenchReport(columns=["name", "value"], title="demo")
        r.add_row(["a", 1.5])
        r.add_row(["b", None])
        return r

    def test_text_and_tsv_share_cells(self):
        r = self._report()
        text = r.to_text()
        tsv = r.to_tsv()
        assert "# demo" in text
        assert "1.5" in text and SATURATED in text
        lines = tsv.splitlines()
        assert lines[0].startswith("#")
        assert "name\tvalue" in tsv
        assert "b\tsat" in tsv

    def test_row_length_checked(self):
        r = self._report()
        with pytest.raises(ValueError, match="cells"):
            r.add_row(["too", "many", "cells"])

    def test_column_values(self):
        r = self._report()
        assert r.column_values("name") == ["a", "b"]
        assert r.column_values("value") == ["1.5", "sat"]
        with pytest.raises(ValueError, match="column"):
            r.column_values("missing")

    def test_save_tsv(self, tmp_path):
        path = self._report().save_tsv(tmp_path / "r.tsv")
        assert Path(path).read_text() == self._report().to_tsv()


class TestFigures:
    def test_training_curves_written(self, tmp_path):
        history = [
            {"epoch": e, "lambda": 3 + e, "nll": 1.0 / (e + 1),
             "est_loss": 0.5, "psnr_val": 20 + e, "alpha_hat": 0.01,
             "sigma1_hat": 0.02, "sigma2_hat": 0.02}
            for e in range(4)
        ]
        path = render_training_curves(history, tmp_path / "curves.png")
        assert Path(path).read_bytes()[:8] == PNG_MAGIC

    def test_bar_figure_written(self, tmp_path):
        path = render_bar_figure(["a", "b"], [1.0, float("nan")], "psnr",
                                 tmp_path / "bar.png")
        assert Path(path).read_bytes()[:8] == PNG_MAGIC


class TestToyScenes:
    def test_shapes_range_and_determinism(self):
        imgs = toy_clean_images(3, 40, 56, seed=5)
        assert len(imgs) == 3
        assert all(t.data.shape == (40, 56, 1) for t in imgs)
        assert all(t.data.min() >= 0.01 and t.data.max() <= 0.99 for t in imgs)
        again = toy_clean_images(3, 40, 56, seed=5)
        for a, b in zip(imgs, again):
            np.testing.assert_array_equal(a.data, b.data)
        other = toy_clean_images(3, 40, 56, seed=6)
        assert any(not np.array_equal(a.data, b.data)
                   for a, b in zip(imgs, other))

    def test_three_channel(self):
        imgs = toy_clean_images(2, 32, 32, channels=3, seed=1)
        assert all(t.channels == 3 for t in imgs)

    def test_write_dataset_names(self, tmp_path):
        write_toy_dataset(tmp_path, 2, height=32, width=32, seed=0)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["toy_000.pgm", "toy_001.pgm"]
        write_toy_dataset(tmp_path / "rgb", 1, height=32, width=32,
                          channels=3, seed=0)
        assert (tmp_path / "rgb" / "toy_000.ppm").exists()


class TestResolveLevels:
    def test_names_tuples_and_zero(self):
        got = resolve_levels(["pg3", "zero", (0.2, 0.01)])
        assert got[0] == ("pg3", 0.05, 0.02)
        assert got[1] == ("zero", 0.0, 0.0)
        assert got[2][1:] == (0.2, 0.01)
        assert got[2][0] == "a0.2_s0.01"

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="level"):
            resolve_levels(["pg9"])


@pytest.fixture(scope="module")
def clean_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("clean")
    write_toy_dataset(root, 6, height=48, width=48, seed=31)
    return root


class TestBenchEstimation:
    def test_report_rows_and_save(self, clean_dir, tmp_path):
        report = bench_estimation(clean_dir, levels=[(0.1, 0.02)], seed=3)
        assert len(report.rows) == 1
        row = dict(zip(report.columns, report.rows[0]))
        assert row["level"] == "a0.1_s0.02"
        assert float(row["alpha_hat"]) > 0
        tsv, fig = save_estimation_report(report, tmp_path)
        assert Path(tsv).exists()
        assert Path(fig).read_bytes()[:8] == PNG_MAGIC

    def test_bad_fit_mode(self, clean_dir):
        with pytest.raises(ValueError, match="fit"):
            bench_estimation(clean_dir, levels=["pg5"], fit="random")


class TestRunAblation:
    def test_axes_tuple(self):
        assert ABLATION_AXES == ("grain", "weight", "scheme", "noise_model",
                                 "iid", "lambda")

    def test_grain_axis_runs_without_training(self, clean_dir):
        cfg = TrainConfig(alpha=0.05, sigma=0.02, seed=0)
        report = run_ablation("grain", cfg, data=clean_dir)
        assert [r[0] for r in report.rows] == [
            "grain=cg", "grain=fg1", "grain=cg+fg1", "grain=cg+fg2",
            "grain=cg+fg1+fg2"]
        errs = [float(v) for v in report.column_values("alpha_err")]
        assert all(np.isfinite(e) for e in errs)

    def test_iid_axis_trains_and_annotates(self, clean_dir, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=2, patch_size=32,
                          patches_per_image=1, alpha=0.05, sigma=0.02,
                          cell_size=2, val_count=2, seed=0)
        report = run_ablation("iid", cfg, data=clean_dir,
                              out_dir=tmp_path / "runs")
        assert [r[0] for r in report.rows] == ["iid=true", "iid=false"]
        notes = report.column_values("note")
        assert notes[1].startswith("expected")
        assert (tmp_path / "runs" / "iid_true" / "metrics.tsv").exists()

    def test_unknown_axis(self, clean_dir):
        with pytest.raises(ValueError, match="axis"):
            run_ablation("bogus", TrainConfig(), data=clean_dir)

    def test_needs_data(self):
        with pytest.raises(ValueError, match="dataset"):
            run_ablation("grain", TrainConfig())


@pytest.fixture(scope="module")
def cli_space(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


class TestCliPipeline:
    """End-to-end command wiring in one shared scratch directory."""

    def test_synth_toy(self, cli_space, capsys):
        rc = main(["synth", "--toy", "4", "--out", str(cli_space / "clean"),
                   "--height", "48", "--width", "48", "--seed", "7"])
        assert rc == 0
        assert "wrote 4 images" in capsys.readouterr().out
        files = sorted((cli_space / "clean").iterdir())
        assert [f.name for f in files] == [f"toy_{i:03d}.pgt" for i in range(4)]

    def test_synth_corrupt(self, cli_space, capsys):
        rc = main(["synth", "--in", str(cli_space / "clean"),
                   "--out", str(cli_space / "noisy"),
                   "--alpha", "0.05", "--sigma", "0.02", "--seed", "7"])
        assert rc == 0
        noisy = load_image(cli_space / "noisy" / "toy_000.pgt")
        clean = load_image(cli_space / "clean" / "toy_000.pgt")
        assert not np.array_equal(noisy.data, clean.data)

    def test_gat_round_trip(self, cli_space):
        noisy = cli_space / "noisy" / "toy_000.pgt"
        fwd = cli_space / "g.pgt"
        back = cli_space / "fresh" / "dir" / "ginv.pgt"
        assert main(["gat", "--in", str(noisy), "--alpha", "0.05",
                     "--sigma", "0.02", "--out", str(fwd)]) == 0
        assert main(["gat", "--in", str(fwd), "--alpha", "0.05",
                     "--sigma", "0.02", "--inverse", "--out", str(back)]) == 0
        orig = load_image(noisy).data
        restored = load_image(back).data
        # read noise can push a pixel below the transform's domain floor
        # -((3/8) a^2 + s^2) / a, where the forward clip loses the value
        valid = orig > -0.026
        assert valid.mean() > 0.95
        np.testing.assert_allclose(restored[valid], orig[valid], atol=1e-5)

    def test_estimate(self, cli_space, capsys):
        rc = main(["estimate", "--in", str(cli_space / "noisy" / "toy_000.pgt")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "alpha_hat = " in out and "sigma_hat = " in out
        assert "loss = " in out

    def test_train_and_denoise(self, cli_space, capsys):
        cfg = cli_space / "micro.cfg"
        cfg.write_text(
            "epochs = 1\nbatch_size = 2\npatch_size = 32\n"
            "patches_per_image = 1\nalpha = 0.05\nsigma = 0.02\n"
            "cell_size = 2\nval_count = 2\nseed = 0\n")
        rc = main(["train", "--data", str(cli_space / "clean"),
                   "--config", str(cfg), "--out", str(cli_space / "run")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "gain = " in out
        assert (cli_space / "run" / "manifest.txt").exists()
        assert (cli_space / "run" / "metrics.png").exists()

        # the output directory does not exist yet; denoise must create it
        dn_dir = cli_space / "denoised"
        rc = main(["denoise", "--ckpt", str(cli_space / "run"),
                   "--in", str(cli_space / "noisy" / "toy_000.pgt"),
                   "--out", str(dn_dir / "toy_000.pgt")])
        assert rc == 0
        assert load_image(dn_dir / "toy_000.pgt").data.shape == (48, 48, 1)

    def test_eval_with_report(self, cli_space, capsys):
        rc = main(["eval", "--pred", str(cli_space / "denoised"),
                   "--ref", str(cli_space / "clean"),
                   "--out", str(cli_space / "evalout")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mean" in out
        assert (cli_space / "evalout" / "eval.tsv").exists()
        png = (cli_space / "evalout" / "eval.png").read_bytes()
        assert png[:8] == PNG_MAGIC

    def test_eval_saturation_marker(self, cli_space, capsys):
        rc = main(["eval", "--pred", str(cli_space / "clean"),
                   "--ref", str(cli_space / "clean")])
        assert rc == 0
        assert SATURATED in capsys.readouterr().out

    def test_bench(self, cli_space, capsys):
        rc = main(["bench", "--data", str(cli_space / "clean"),
                   "--levels", "pg5", "--out", str(cli_space / "benchout")])
        assert rc == 0
        assert (cli_space / "benchout" / "bench.tsv").exists()
        assert (cli_space / "benchout" / "bench.png").exists()

    def test_ablate_grain(self, cli_space, capsys):
        cfg = cli_space / "abl.cfg"
        cfg.write_text("alpha = 0.05\nsigma = 0.02\nseed = 0\n")
        rc = main(["ablate", "--axis", "grain", "--config", str(cfg),
                   "--data", str(cli_space / "clean"),
                   "--out", str(cli_space / "ablout")])
        assert rc == 0
        assert (cli_space / "ablout" / "ablation_grain.tsv").exists()
        assert (cli_space / "ablout" / "ablation_grain.png").exists()

    def test_error_exit_code(self, cli_space, capsys):
        rc = main(["estimate", "--in", str(cli_space / "missing.pgt")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_exact_requires_positive_alpha(self, cli_space, capsys):
        rc = main(["synth", "--in", str(cli_space / "clean"),
                   "--out", str(cli_space / "x"), "--exact"])
        assert rc == 2
        assert "alpha" in capsys.readouterr().err


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "pgblind.cli", "--help"],
                          capture_output=True, text=True)
    # argparse prints help and exits 0
    assert proc.returncode == 0
    for cmd in ("synth", "gat", "estimate", "train", "denoise", "eval",
                "bench", "ablate"):
        assert cmd in proc.stdout
