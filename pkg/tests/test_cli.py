"""Command-line interface: outputs, exit codes, determinism, idempotence."""

import csv
import json

import numpy as np
import pytest

from sparseview.cli import main
from sparseview.io import read_pfm

CONFIG_TOML = """
oracle = "stub:identity,harmonic"
seed = 0

[schedule]
stage1_iters = 40
stage1_refresh = 20
stage1_views = 4
stage2_iters = 40
stage2_cycle = 20
stage2_views = 4
inpaint_stop_iter = 40
loo_pretrain_iters = 12
loo_total_iters = 24
snapshot_iters = [12, 18, 24]
preview_every = 20

[schedule.step_sizes]
position_init = 2.4e-3
position_final = 2.4e-5
opacity = 0.1
"""


@pytest.fixture()
def config_path(tmp_path, dataset_dir):
    path = tmp_path / "run.toml"
    path.write_text(f'dataset = "{dataset_dir}"\n' + CONFIG_TOML)
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestFuse:
    def test_outputs_and_summary(self, config_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "fuse") == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("view")]
        assert len(lines) == 3
        for line in lines:
            assert "residual=" in line
            assert float(line.split("residual=")[1]) < 1e-8
        for i in range(3):
            assert (out / "depth_fused" / f"view_{i:03d}.pfm").exists()
            assert (out / "mask_bg" / f"view_{i:03d}.png").exists()

    def test_refuses_overwrite_without_force(self, config_path, tmp_path):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "fuse") == 0
        assert run("--config", config_path, "--out", out, "fuse") == 1
        assert run("--config", config_path, "--out", out, "--force", "fuse") == 0

    def test_missing_mono_depth_exit_2(self, config_path, dataset_dir, tmp_path):
        (dataset_dir / "depth_mono" / "view_000.pfm").unlink()
        assert run("--config", config_path, "--out", tmp_path / "o", "fuse") == 2


class TestOptimize:
    def test_stage2_requires_stage1(self, config_path, tmp_path, capsys):
        code = run("--config", config_path, "--out", tmp_path / "out", "optimize", "--stage", "2")
        assert code == 3
        assert "stage 1 checkpoint required" in capsys.readouterr().err

    def test_stage1_outputs(self, config_path, tmp_path):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "optimize", "--stage", "1") == 0
        assert (out / "stage1.ckpt").exists()
        with open(out / "loss_stage1.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == "iteration"
        assert len(rows) == 41  # header + 40 iterations
        previews = list((out / "previews").glob("stage1_*.png"))
        assert len(previews) == 2

    def test_identical_runs_identical_outputs(self, config_path, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run("--config", config_path, "--out", out_a, "optimize", "--stage", "1") == 0
        assert run("--config", config_path, "--out", out_b, "optimize", "--stage", "1") == 0
        assert (out_a / "loss_stage1.csv").read_bytes() == (out_b / "loss_stage1.csv").read_bytes()
        assert (out_a / "stage1.ckpt").read_bytes() == (out_b / "stage1.ckpt").read_bytes()

    def test_full_both_stages(self, config_path, tmp_path):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "optimize", "--stage", "1") == 0
        assert run("--config", config_path, "--out", out, "optimize", "--stage", "2") == 0
        assert (out / "stage2.ckpt").exists()
        assert (out / "oracle_journal_stage2.jsonl").exists()


class TestInit:
    def test_init_writes_checkpoint(self, config_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "init") == 0
        assert (out / "init.ckpt").exists()
        assert "initialized" in capsys.readouterr().out


class TestRenderEval:
    def test_render_then_eval_self_is_perfect(self, config_path, tmp_path, capsys):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "optimize", "--stage", "1") == 0
        renders = tmp_path / "renders"
        assert (
            run(
                "--config", config_path, "--out", out, "render",
                "--checkpoint", out / "stage1.ckpt", "--render-out", renders,
            )
            == 0
        )
        assert len(list(renders.glob("render_*.png"))) == 8
        metrics = tmp_path / "metrics.csv"
        code = run(
            "--config", config_path, "eval",
            "--renders", renders, "--truth", renders, "--metrics-out", metrics,
        )
        assert code == 0
        with open(metrics) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["view_id", "psnr", "ssim"]
        for row in rows[1:]:
            assert float(row[1]) == 99.0
            assert float(row[2]) == pytest.approx(1.0)
        assert rows[-1][0] == "mean"

    def test_eval_20db_offset_fixture(self, tmp_path):
        from sparseview.io import write_image

        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        rng = np.random.default_rng(0)
        base = np.rint(rng.uniform(0.2, 0.7, (16, 16, 3)) * 255) / 255
        write_image(a_dir / "v0.png", base)
        # A 20 dB offset needs mse exactly 0.01; on the 8-bit grid mix
        # 25- and 26-step offsets: 388 * 25^2 + 380 * 26^2 = 0.01 * 768 * 255^2.
        steps = np.concatenate([np.full(388, 25.0), np.full(380, 26.0)]) / 255.0
        offset = base + steps.reshape(16, 16, 3)
        write_image(b_dir / "v0.png", offset)
        metrics = tmp_path / "m.csv"
        assert run("eval", "--renders", a_dir, "--truth", b_dir, "--metrics-out", metrics) == 0
        with open(metrics) as f:
            rows = list(csv.reader(f))
        assert rows[-1][0] == "mean"
        assert float(rows[-1][1]) == pytest.approx(20.0, abs=0.01)

    def test_mismatched_sets_exit_4(self, tmp_path):
        from sparseview.io import write_image

        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        write_image(a_dir / "v0.png", np.zeros((8, 8, 3)))
        write_image(b_dir / "v0.png", np.zeros((8, 8, 3)))
        write_image(b_dir / "v1.png", np.zeros((8, 8, 3)))
        assert run("eval", "--renders", a_dir, "--truth", b_dir, "--metrics-out", tmp_path / "m.csv") == 4


class TestLooPairs:
    def test_nine_pairs_and_audit(self, config_path, tmp_path):
        out = tmp_path / "out"
        assert run("--config", config_path, "--out", out, "loo-pairs") == 0
        pairs_dir = out / "loo_pairs"
        corrupt = sorted(pairs_dir.glob("view_*/iter_*_corrupt.png"))
        clean = sorted(pairs_dir.glob("view_*/iter_*_clean.png"))
        assert len(corrupt) == 9 and len(clean) == 9
        audit = json.loads((pairs_dir / "audit.json").read_text())
        assert len(audit["pairs"]) == 9


class TestUsage:
    def test_unknown_command_is_usage_error(self):
        assert run("frobnicate") == 1

    def test_unknown_stub_is_usage_error(self, config_path, tmp_path):
        code = run(
            "--config", config_path, "--out", tmp_path / "o",
            "--oracle", "stub:bogus,harmonic", "optimize", "--stage", "1",
        )
        assert code == 1
