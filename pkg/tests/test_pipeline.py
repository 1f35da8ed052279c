import hashlib
import json
import os

import numpy as np
import pytest

from lvoslam import cli, formats, pipeline
from lvoslam.errors import ConfigError, ShapeError
from lvoslam.flow import invert_depth
from lvoslam.gaussian import LossWeights, PredictConfig
from lvoslam.geometry import CameraIntrinsics, RelativePose, accumulate_trajectory
from lvoslam.net import LvoConfig, LvoModel, as_float32, checkpoint_bytes, load_checkpoint
from lvoslam.octree import OctreeConfig, read_ply
from lvoslam.synthetic import write_sequence
from lvoslam.training import TrainConfig

IDENTITY_LINE = "1 0 0 0 0 1 0 0 0 0 1 0"


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def synth(tmp_path):
    """A synthetic 10-frame sequence plus the sample config, written through the CLI."""
    assert cli.main(["synth", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def _write_manual_sequence(seq_dir, depths, intr, poses=None):
    os.makedirs(seq_dir / "depth")
    os.makedirs(seq_dir / "flow")
    formats.save_intrinsics(seq_dir / "calib.txt", intr)
    for k, d in enumerate(depths):
        formats.write_pfm(seq_dir / "depth" / f"{k:06d}.pfm", np.asarray(d, np.float32))
        if k + 1 < len(depths):
            formats.write_flo(seq_dir / "flow" / f"{k:06d}.flo", np.zeros(np.shape(d) + (2,), np.float32))
    if poses is not None:
        formats.save_poses(seq_dir / "poses.txt", poses)
    return pipeline.index_sequence(str(seq_dir))


class TestAssociate:
    def test_two_frames_one_file(self, tmp_path):
        seq = write_sequence(tmp_path, frames=2, width=16, height=8)
        out = pipeline.cmd_associate(pipeline.index_sequence(seq), tmp_path / "a", factor=2)
        assert len(out) == 1 and os.listdir(tmp_path / "a") == ["000000.f3d"]
        assert formats.read_f3d(out[0]).shape == (4, 8, 3)

    def test_rerun_bit_identical(self, tmp_path):
        seq = pipeline.index_sequence(write_sequence(tmp_path, frames=4, width=16, height=8))
        a = pipeline.cmd_associate(seq, tmp_path / "a", factor=2)
        b = pipeline.cmd_associate(seq, tmp_path / "b", factor=2)
        assert [sha(p) for p in a] == [sha(p) for p in b]

    def test_zero_flow(self, tmp_path):
        rng = np.random.default_rng(0)
        d = rng.uniform(1, 30, (2, 6, 8))
        seq = _write_manual_sequence(tmp_path / "s", d, CameraIntrinsics(5, 5, 4, 3))
        (path,) = pipeline.cmd_associate(seq, tmp_path / "a", factor=1)
        d32 = d.astype(np.float32)
        want = (invert_depth(d32[1]) - invert_depth(d32[0])).astype(np.float32)
        np.testing.assert_array_equal(formats.read_f3d(path)[..., 2], want)

    def test_missing_frame(self, tmp_path):
        seq = pipeline.index_sequence(write_sequence(tmp_path, frames=3, width=16, height=8))
        os.remove(seq.flow_paths[1])
        with pytest.raises(FileNotFoundError, match="frame 1"):
            pipeline.cmd_associate(seq, tmp_path / "a", factor=2)


NET = LvoConfig(16, 8, (4, 8), fc_hidden=8)


def _dataset(tmp_path, frames=6):
    seq = pipeline.index_sequence(write_sequence(tmp_path, frames=frames))
    pipeline.cmd_associate(seq, tmp_path / "a", factor=4)
    return pipeline.load_training_set(tmp_path / "a", seq.pose_path)


class TestTrain:
    def test_zero_epochs_saves_init(self, tmp_path):
        data = _dataset(tmp_path)
        cfg = TrainConfig(epochs=0, seed=3)
        pipeline.cmd_train(data, NET, cfg, LossWeights(), tmp_path / "m")
        saved = load_checkpoint(tmp_path / "m" / "checkpoint.lvo")
        assert saved.equals(as_float32(LvoModel.init(NET, seed=3)))
        assert (tmp_path / "m" / "loss.csv").read_text() == "epoch,loss\n"

    def test_same_seed_same_checkpoint(self, tmp_path):
        data = _dataset(tmp_path)
        cfg = TrainConfig(batch_size=2, epochs=2, learning_rate=1e-3, augment=True, seed=1)
        pipeline.cmd_train(data, NET, cfg, LossWeights(), tmp_path / "m1")
        pipeline.cmd_train(data, NET, cfg, LossWeights(), tmp_path / "m2")
        for name in ("checkpoint.lvo", "loss.csv"):
            assert sha(tmp_path / "m1" / name) == sha(tmp_path / "m2" / name)
        assert len((tmp_path / "m1" / "loss.csv").read_text().splitlines()) == 3

    def test_missing_ground_truth(self, tmp_path):
        seq = pipeline.index_sequence(write_sequence(tmp_path, frames=3))
        pipeline.cmd_associate(seq, tmp_path / "a", factor=4)
        with pytest.raises(FileNotFoundError, match="ground-truth"):
            pipeline.load_training_set(tmp_path / "a", None)

    def test_raster_size_mismatch(self, tmp_path):
        data = _dataset(tmp_path)
        with pytest.raises(ShapeError):
            pipeline.cmd_train(data, LvoConfig(32, 8, (4, 8)), TrainConfig(epochs=1), LossWeights(), tmp_path / "m")


def _identity_model():
    m = LvoModel.zeros(NET)
    # unit sigma, zero mean, zero y, zero rotation
    return m


class TestOdometry:
    def test_identity_model(self, tmp_path):
        _dataset(tmp_path, frames=5)
        traj = pipeline.cmd_odometry(_identity_model(), tmp_path / "a", tmp_path / "o.txt",
                                     PredictConfig(deterministic=True))
        lines = (tmp_path / "o.txt").read_text().splitlines()
        assert lines == [IDENTITY_LINE] * 5
        np.testing.assert_array_equal(traj, np.tile(np.eye(4), (5, 1, 1)))

    def test_line_count(self, tmp_path):
        _dataset(tmp_path, frames=7)
        m = LvoModel.init(NET, 0)
        pipeline.cmd_odometry(m, tmp_path / "a", tmp_path / "o.txt", PredictConfig(n_samples=50))
        lines = (tmp_path / "o.txt").read_text().splitlines()
        assert len(lines) == 7 and lines[0] == IDENTITY_LINE

    def test_deterministic_twice(self, tmp_path):
        _dataset(tmp_path, frames=5)
        m = LvoModel.init(NET, 4)
        for name in ("a.txt", "b.txt"):
            pipeline.cmd_odometry(m, tmp_path / "a", tmp_path / name, PredictConfig(deterministic=True))
        assert sha(tmp_path / "a.txt") == sha(tmp_path / "b.txt")

    def test_sampling_seeded(self, tmp_path):
        _dataset(tmp_path, frames=5)
        m = LvoModel.init(NET, 4)
        for name in ("a.txt", "b.txt"):
            pipeline.cmd_odometry(m, tmp_path / "a", tmp_path / name, PredictConfig(n_samples=100, seed=9))
        assert sha(tmp_path / "a.txt") == sha(tmp_path / "b.txt")

    def test_shape_mismatch(self, tmp_path):
        _dataset(tmp_path, frames=3)
        with pytest.raises(ShapeError):
            pipeline.cmd_odometry(LvoModel.zeros(LvoConfig(32, 8, (4, 8))), tmp_path / "a",
                                  tmp_path / "o.txt", PredictConfig(deterministic=True))


def _straight(n, step=1.0):
    return accumulate_trajectory([RelativePose([0, 0, step], [0, 0, 0])] * (n - 1))


class TestEvaluate:
    def test_self(self, tmp_path):
        formats.save_poses(tmp_path / "gt.txt", _straight(150))
        rep = pipeline.cmd_evaluate(tmp_path / "gt.txt", tmp_path / "gt.txt", tmp_path / "e", lengths=(100,))
        assert rep.t_rel == 0 and rep.r_rel == 0
        row = (tmp_path / "e" / "summary.csv").read_text().splitlines()[1].split(",")
        assert row[1:] == ["0.00", "0.0000", "0.00"]

    def test_scaled(self, tmp_path):
        formats.save_poses(tmp_path / "gt.txt", _straight(150))
        formats.save_poses(tmp_path / "p.txt", _straight(150, 1.05))
        pipeline.cmd_evaluate(tmp_path / "gt.txt", tmp_path / "p.txt", tmp_path / "e", lengths=(100,))
        assert (tmp_path / "e" / "summary.csv").read_text().splitlines()[1].split(",")[1] == "5.00"

    def test_count_mismatch(self, tmp_path):
        formats.save_poses(tmp_path / "gt.txt", _straight(10))
        formats.save_poses(tmp_path / "p.txt", _straight(9))
        with pytest.raises(ShapeError):
            pipeline.cmd_evaluate(tmp_path / "gt.txt", tmp_path / "p.txt", tmp_path / "e")


class TestMap:
    intr = CameraIntrinsics(2.0, 2.0, 1.0, 1.0)

    def test_zero_frames(self, tmp_path):
        seq = _write_manual_sequence(tmp_path / "s", [], self.intr)
        (tmp_path / "t.txt").write_text("")
        pipeline.cmd_map(tmp_path / "t.txt", seq, self.intr, OctreeConfig(), tmp_path / "m.ply")
        assert len(read_ply(tmp_path / "m.ply")) == 0

    def test_single_pixel(self, tmp_path):
        d = np.full((3, 3), np.nan)
        d[1, 1] = 4.0
        seq = _write_manual_sequence(tmp_path / "s", [d], self.intr)
        formats.save_poses(tmp_path / "t.txt", np.eye(4)[None])
        tree = pipeline.cmd_map(tmp_path / "t.txt", seq, self.intr, OctreeConfig(resolution=0.5), tmp_path / "m.ply")
        (v,) = tree.extract_occupied()
        assert v.center == (0.25, 0.25, 4.25)
        np.testing.assert_allclose(read_ply(tmp_path / "m.ply"), [[0.25, 0.25, 4.25, 128, 128, 128]])
        assert (tmp_path / "m.oct").exists()

    def test_wall_from_three_poses(self, tmp_path):
        # fronto-parallel wall at z = 5 seen while driving forward 1 m per frame
        depths = [np.full((3, 3), 5.0 - k) for k in range(3)]
        poses = _straight(3)
        seq = _write_manual_sequence(tmp_path / "s", depths, self.intr)
        formats.save_poses(tmp_path / "t.txt", poses)
        tree = pipeline.cmd_map(tmp_path / "t.txt", seq, self.intr, OctreeConfig(resolution=0.5), tmp_path / "m.ply")
        # the optical-axis voxel is hit once per frame: 3 hits of 0.7 give 343/370
        assert tree.probability((0, 0, 10)) == pytest.approx(343 / 370, abs=1e-12)
        for v in tree.extract_occupied():
            assert v.center[2] == 5.25

    def test_frame_count_mismatch(self, tmp_path):
        seq = _write_manual_sequence(tmp_path / "s", [np.ones((2, 2))] * 2, self.intr)
        formats.save_poses(tmp_path / "t.txt", _straight(3))
        with pytest.raises(ShapeError):
            pipeline.cmd_map(tmp_path / "t.txt", seq, self.intr, OctreeConfig(), tmp_path / "m.ply")


class TestConfig:
    def test_sample_config(self, synth):
        cfg = pipeline.load_config(synth / "pipeline.ini")
        assert cfg.sequences == ["00"] and cfg.network.input_width == 16
        assert cfg.eval_lengths == (2.0, 4.0, 6.0)
        assert cfg.root == str(synth)

    def test_overrides(self, synth):
        cfg = pipeline.load_config(synth / "pipeline.ini", seed=7, deterministic=True, out="/tmp/x")
        assert cfg.seed == cfg.train.seed == cfg.predict.seed == 7
        assert cfg.predict.deterministic and cfg.out == "/tmp/x"

    def test_digest_stable(self, synth):
        a = pipeline.load_config(synth / "pipeline.ini")
        b = pipeline.load_config(synth / "pipeline.ini", out="elsewhere")
        assert a.digest() == b.digest()
        assert a.digest() != pipeline.load_config(synth / "pipeline.ini", seed=1).digest()

    @pytest.mark.parametrize("text", [
        "[pipeline]\nroot = .\nsequences = 00\n[bogus]\n",
        "[pipeline]\nroot = .\nsequences = 00\nfoo = 1\n",
        "[pipeline]\nroot = .\nsequences = 00\n[train]\nbatch_size = 0\n",
        "[pipeline]\nroot = .\nsequences = 00\n[network]\ninput_width = abc\n",
        "[pipeline]\nroot = .\n",
        "[network]\ninput_width = 16\n",
        "not an ini file",
    ])
    def test_invalid(self, tmp_path, text):
        (tmp_path / "c.ini").write_text(text)
        with pytest.raises(ConfigError):
            pipeline.load_config(tmp_path / "c.ini")


def _run(synth, out, *extra):
    return cli.main(["run", "--config", str(synth / "pipeline.ini"), "--out", str(out), *extra])


class TestRun:
    def test_outputs_and_manifest(self, synth, tmp_path):
        assert _run(synth, tmp_path / "o", "--deterministic") == 0
        out = tmp_path / "o"
        for rel in ("associated/00/000000.f3d", "model/checkpoint.lvo", "model/loss.csv",
                    "odometry/00.txt", "eval/00/summary.csv", "map/00.ply", "map/00.oct"):
            assert (out / rel).exists(), rel
        assert len((out / "odometry/00.txt").read_text().splitlines()) == 10
        man = json.loads((out / "manifest.json").read_text())
        assert man["seed"] == 0 and man["deterministic"] is True
        assert man["stages"] == {"associate": "ok", "train": "ok", "odometry": "ok",
                                 "evaluate": "ok", "map": "ok"}
        assert man["outputs"]["map/00.ply"] == sha(out / "map/00.ply")
        assert {"package_version", "numpy_version", "python_version", "config_sha256"} <= set(man)

    def test_rerun_identical(self, synth, tmp_path):
        _run(synth, tmp_path / "a")
        _run(synth, tmp_path / "b")
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["outputs_sha256"] == mb["outputs_sha256"]

    def test_seed_changes_outputs(self, synth, tmp_path):
        _run(synth, tmp_path / "a")
        _run(synth, tmp_path / "b", "--seed", "1")
        assert sha(tmp_path / "a" / "model/checkpoint.lvo") != sha(tmp_path / "b" / "model/checkpoint.lvo")

    def test_missing_ground_truth_noted(self, synth, tmp_path):
        # train on one copy of the sequence, predict on a second one without poses
        import shutil

        shutil.copytree(synth / "00", synth / "01")
        os.remove(synth / "01" / "poses.txt")
        text = (synth / "pipeline.ini").read_text().replace("sequences = 00\ntrain", "sequences = 01\ntrain")
        (synth / "pipeline.ini").write_text(text)
        assert _run(synth, tmp_path / "o") == 0
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert any("evaluation skipped for sequence 01" in n for n in man["notes"])
        assert not (tmp_path / "o" / "eval" / "01").exists()

    def test_stage_failure_keeps_earlier_outputs(self, synth, tmp_path):
        os.remove(synth / "00" / "poses.txt")
        assert _run(synth, tmp_path / "o") == cli.EXIT_IO
        assert (tmp_path / "o" / "associated/00/000008.f3d").exists()
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["stages"] == {"associate": "ok", "train": "failed"}

    def test_matches_manual_stages(self, synth, tmp_path):
        _run(synth, tmp_path / "run", "--deterministic")
        cfg = pipeline.load_config(synth / "pipeline.ini", deterministic=True, out=str(tmp_path / "man"))
        seq = pipeline.index_sequence(cfg.sequence_dir("00"))
        a = tmp_path / "man" / "associated" / "00"
        pipeline.cmd_associate(seq, a, cfg.downsample, cfg.max_inv)
        model, _ = pipeline.cmd_train(pipeline.load_training_set(a, seq.pose_path), cfg.network, cfg.train,
                                      cfg.loss, tmp_path / "man" / "model")
        pipeline.cmd_odometry(model, a, tmp_path / "man" / "odometry" / "00.txt", cfg.predict)
        pipeline.cmd_evaluate(seq.pose_path, tmp_path / "man" / "odometry" / "00.txt",
                              tmp_path / "man" / "eval" / "00", cfg.frame_period, cfg.eval_lengths)
        pipeline.cmd_map(tmp_path / "man" / "odometry" / "00.txt", seq, formats.load_intrinsics(seq.intrinsics_path),
                         cfg.octree, tmp_path / "man" / "map" / "00.ply", cfg.map_step)
        for rel in ("model/checkpoint.lvo", "odometry/00.txt", "eval/00/summary.csv", "map/00.ply"):
            assert sha(tmp_path / "run" / rel) == sha(tmp_path / "man" / rel), rel

    def test_uses_given_checkpoint(self, synth, tmp_path):
        _run(synth, tmp_path / "a")
        text = (synth / "pipeline.ini").read_text()
        ckpt = tmp_path / "a" / "model" / "checkpoint.lvo"
        (synth / "pipeline.ini").write_text(text.replace("[network]", f"checkpoint = {ckpt}\n\n[network]"))
        assert _run(synth, tmp_path / "b") == 0
        man = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert "load_checkpoint" in man["stages"] and "train" not in man["stages"]
        assert sha(tmp_path / "a" / "odometry/00.txt") == sha(tmp_path / "b" / "odometry/00.txt")


class TestCli:
    def test_stage_commands(self, synth, tmp_path):
        cfg = ["--config", str(synth / "pipeline.ini"), "--out", str(tmp_path / "o"), "--deterministic"]
        for cmd in ("associate", "train", "odometry", "map"):
            assert cli.main([cmd, *cfg]) == 0, cmd
        assert (tmp_path / "o" / "map" / "00.ply").exists()
        rc = cli.main(["evaluate", "--gt", str(synth / "00" / "poses.txt"),
                       "--pred", str(tmp_path / "o" / "odometry" / "00.txt"), "--out", str(tmp_path / "e"),
                       "--config", str(synth / "pipeline.ini")])
        assert rc == 0 and (tmp_path / "e" / "summary.csv").exists()

    def test_evaluate_prints_summary(self, tmp_path, capsys):
        formats.save_poses(tmp_path / "gt.txt", _straight(200))
        assert cli.main(["evaluate", "--gt", str(tmp_path / "gt.txt"), "--pred", str(tmp_path / "gt.txt"),
                         "--out", str(tmp_path / "e")]) == 0
        assert "t_rel 0.00 %" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        rc = cli.main(["evaluate", "--gt", str(tmp_path / "nope.txt"), "--pred", str(tmp_path / "nope.txt")])
        assert rc == cli.EXIT_IO == 5
        assert "nope.txt" in capsys.readouterr().err

    def test_parse_error(self, tmp_path, capsys):
        (tmp_path / "gt.txt").write_text("1 0 0\n")
        rc = cli.main(["evaluate", "--gt", str(tmp_path / "gt.txt"), "--pred", str(tmp_path / "gt.txt")])
        assert rc == cli.EXIT_PARSE == 3
        assert ":1:" in capsys.readouterr().err

    def test_shape_error(self, tmp_path):
        formats.save_poses(tmp_path / "a.txt", _straight(5))
        formats.save_poses(tmp_path / "b.txt", _straight(6))
        rc = cli.main(["evaluate", "--gt", str(tmp_path / "a.txt"), "--pred", str(tmp_path / "b.txt"),
                       "--out", str(tmp_path / "e")])
        assert rc == cli.EXIT_SHAPE == 4

    def test_config_error(self, tmp_path):
        (tmp_path / "c.ini").write_text("[pipeline]\nroot = .\nsequences = 00\nbad = 1\n")
        assert cli.main(["run", "--config", str(tmp_path / "c.ini")]) == cli.EXIT_CONFIG == 2

    def test_missing_sequence_is_config_error(self, tmp_path):
        (tmp_path / "c.ini").write_text("[pipeline]\nroot = .\nsequences = 42\n")
        assert cli.main(["run", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o")]) == 2

    def test_usage_errors(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["run"])
        assert e.value.code == 2
        with pytest.raises(SystemExit) as e:
            cli.main(["frobnicate"])
        assert e.value.code == 2

    def test_corrupt_checkpoint(self, synth, tmp_path):
        ckpt = tmp_path / "bad.lvo"
        ckpt.write_bytes(checkpoint_bytes(LvoModel.zeros(NET))[:-1] + b"\0")
        rc = cli.main(["odometry", "--config", str(synth / "pipeline.ini"), "--checkpoint", str(ckpt),
                       "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_PARSE
