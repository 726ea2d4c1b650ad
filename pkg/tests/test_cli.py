import numpy as np
import pytest

from shrvq import checkpoint as ckpt_io
from shrvq.cli import run
from shrvq.pipeline import ModelConfig, TrainingConfig, new_checkpoint, train_disjoint
from shrvq.data import SceneSpec, generate_scene

TINY_CONFIG = """
model.layers = 2
model.branch = 4
model.dim = 4
model.in_channels = 1
model.frame_h = 16
model.frame_w = 16
model.hidden = 16
model.num_downsample = 1
model.num_res_blocks = 1
model.pred_embed = 16
model.pred_heads = 2
model.pred_blocks = 1
model.pred_window = 2
train.codec_epochs = 3
train.predictor_epochs = 2
train.joint_epochs = 1
train.batch_size = 8
train.learning_rate = 0.001
data.context = 2
data.horizon = 2
data.synth_sequences = 2
data.synth_holdout = 2
data.height = 16
data.width = 16
data.radius_min = 3
data.radius_max = 4
data.velocity_min = 1
data.velocity_max = 1
data.length = 5
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CONFIG + extra)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A small trained checkpoint shared by the read-only CLI commands."""
    out = tmp_path_factory.mktemp("train")
    mc = ModelConfig(layers=2, branch=4, dim=4, in_channels=1, frame_h=16,
                     frame_w=16, hidden=16, num_downsample=1, num_res_blocks=1,
                     pred_embed=16, pred_heads=2, pred_blocks=1, pred_window=2)
    tc = TrainingConfig(codec_epochs=3, predictor_epochs=2, batch_size=8,
                        seed=0, learning_rate=1e-3)
    data = [generate_scene(SceneSpec(height=16, width=16, radius_range=(3, 4),
                                     velocity_range=(1, 1), length=5, seed=100 + i))
            for i in range(2)]
    ckpt = train_disjoint(data, mc, tc)
    path = out / "checkpoint.shrvq"
    ckpt_io.save_checkpoint(ckpt, path)
    return path


class TestConfigErrors:
    def test_unknown_key_exits_2_no_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, "data.bogus_key = 1\n")
        out = tmp_path / "out"
        code = run(["evaluate", "--config", str(cfg), "--out", str(out)])
        assert code == 2
        assert not out.exists() or not any(out.iterdir())

    def test_missing_config_file(self, tmp_path):
        code = run(["predict", "--config", str(tmp_path / "nope.cfg"),
                    "--out", str(tmp_path / "out")])
        assert code == 2

    def test_missing_checkpoint_key(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        code = run(["predict", "--config", str(cfg), "--out", str(out)])
        assert code == 2
        assert not out.exists() or not (out / "manifest.txt").exists()


class TestTrainCommands:
    def test_train_hrvqvae_writes_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "checkpoint.shrvq").exists()
        assert (out / "train_log.txt").exists()
        manifest = (out / "manifest.txt").read_text().strip().splitlines()
        assert len(manifest) == 2
        for line in manifest:
            digest, name = line.split("  ")
            assert ckpt_io.file_sha256(out / name) == digest

    def test_reproducible_checkpoints(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(out1)]) == 0
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(out2)]) == 0
        a = ckpt_io.file_sha256(out1 / "checkpoint.shrvq")
        b = ckpt_io.file_sha256(out2 / "checkpoint.shrvq")
        assert a == b

    def test_seed_override_changes_result(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(out1),
                    "--seed", "7"]) == 0
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(out2),
                    "--seed", "8"]) == 0
        assert (ckpt_io.file_sha256(out1 / "checkpoint.shrvq")
                != ckpt_io.file_sha256(out2 / "checkpoint.shrvq"))

    def test_train_astpm_then_joint(self, tmp_path):
        cfg = write_config(tmp_path)
        phase1 = tmp_path / "p1"
        assert run(["train-hrvqvae", "--config", str(cfg), "--out", str(phase1)]) == 0
        cfg2 = write_config(tmp_path)
        cfg2.write_text(TINY_CONFIG + f"data.checkpoint = {phase1 / 'checkpoint.shrvq'}\n")
        phase2 = tmp_path / "p2"
        assert run(["train-astpm", "--config", str(cfg2), "--out", str(phase2)]) == 0
        cfg3 = tmp_path / "joint.cfg"
        cfg3.write_text(TINY_CONFIG + f"data.checkpoint = {phase2 / 'checkpoint.shrvq'}\n")
        joint = tmp_path / "pj"
        assert run(["train-joint", "--config", str(cfg3), "--out", str(joint)]) == 0
        assert (joint / "checkpoint.shrvq").exists()


class TestInferenceCommands:
    def test_predict_artifacts(self, tmp_path, trained):
        cfg = write_config(tmp_path)
        cfg.write_text(TINY_CONFIG + f"data.checkpoint = {trained}\n")
        out = tmp_path / "out"
        assert run(["predict", "--config", str(cfg), "--out", str(out)]) == 0
        # horizon=2: two PNG frames, one GIF, metrics, strip, manifest
        assert (out / "pred_001.png").exists()
        assert (out / "pred_002.png").exists()
        assert (out / "prediction.gif").exists()
        assert (out / "metrics.txt").exists()
        assert (out / "strip.png").exists()
        assert (out / "manifest.txt").exists()

    def test_evaluate_idempotent(self, tmp_path, trained):
        cfg = write_config(tmp_path)
        cfg.write_text(TINY_CONFIG + f"data.checkpoint = {trained}\n")
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        assert run(["evaluate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert run(["evaluate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert (out1 / "report.txt").read_bytes() == (out2 / "report.txt").read_bytes()
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
        header = (out1 / "report.csv").read_text().splitlines()[0]
        assert header == "step,psnr,ssim,mse,mae"

    def test_corrupt_eval(self, tmp_path, trained):
        cfg = write_config(tmp_path)
        cfg.write_text(
            TINY_CONFIG
            + f"data.checkpoint = {trained}\n"
            + "data.corruption = additive_noise\n"
            + "data.corruption_snr_db = 20\n"
        )
        out = tmp_path / "out"
        assert run(["corrupt-eval", "--config", str(cfg), "--out", str(out)]) == 0
        for name in ("report_clean.txt", "report_corrupted.txt", "report_delta.txt"):
            assert (out / name).exists()
        assert "delta.psnr" in (out / "report_delta.txt").read_text()

    def test_export_heatmaps_count(self, tmp_path, trained):
        cfg = write_config(tmp_path)
        cfg.write_text(TINY_CONFIG + f"data.checkpoint = {trained}\n")
        out = tmp_path / "out"
        assert run(["export-heatmaps", "--config", str(cfg), "--out", str(out)]) == 0
        # 2-layer checkpoint, context=2 input frames: 2 heatmaps per frame
        heatmaps = sorted(out.glob("heatmap_f*_layer*.png"))
        assert len(heatmaps) == 4
        for t in range(2):
            per_frame = [p for p in heatmaps if f"_f{t:03d}_" in p.name]
            assert len(per_frame) == 2

    def test_runtime_failure_cleans_partial_outputs(self, tmp_path):
        cfg = write_config(tmp_path)
        cfg.write_text(TINY_CONFIG + f"data.checkpoint = {tmp_path / 'missing.shrvq'}\n")
        out = tmp_path / "out"
        code = run(["predict", "--config", str(cfg), "--out", str(out)])
        assert code == 1
        assert not out.exists() or not any(out.glob("*.png"))
