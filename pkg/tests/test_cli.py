import csv

import numpy as np
import pytest

from taskpyramid import cli, ops
from taskpyramid.affinity import AffinityConfig, affinity_curve
from taskpyramid.synthdata import load_dataset

TINY_CONFIG = """
[model]
scales = 1/4,1/8
channels = 1/4:8,1/8:8
tasks = seg:target,depth:target,edge:auxiliary,normals:auxiliary

[optim]
total_steps = 6
base_lr = 0.005
batch_size = 2
seed = 0
log_every = 2

[data]
H = 32
W = 32
num_shapes = 3
num_classes = 5
seed = 0

[affinity]
dilations = 1,2,4,8
"""

SINGLE_SCALE_CONFIG = """
[model]
scales = 1/4
channels = 1/4:8
tasks = seg:target,depth:target

[optim]
total_steps = 4
base_lr = 0.005
batch_size = 2
seed = 0
log_every = 2

[data]
H = 32
W = 32
num_classes = 5
seed = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    data = root / "data"
    assert cli.main(["synth", "--config", str(cfg), "--out-dir", str(data), "--count", "8"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = workdir / "tiny.ini"
    ckpt = workdir / "model.mtic"
    log = workdir / "train.csv"
    code = cli.main(["train", "--config", str(cfg), "--data-dir", str(workdir / "data"),
                     "--out", str(ckpt), "--log", str(log)])
    assert code == 0
    return ckpt, log


class TestSynth:
    def test_count_zero_writes_only_meta(self, tmp_path, workdir):
        out = tmp_path / "empty"
        code = cli.main(["synth", "--config", str(workdir / "tiny.ini"),
                         "--out-dir", str(out), "--count", "0"])
        assert code == 0
        assert [p.name for p in out.iterdir()] == ["meta.txt"]

    def test_rerun_identical_files(self, tmp_path, workdir):
        cfg = str(workdir / "tiny.ini")
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["synth", "--config", cfg, "--out-dir", str(a), "--count", "3"]) == 0
        assert cli.main(["synth", "--config", cfg, "--out-dir", str(b), "--count", "3"]) == 0
        for name in ("meta.txt", "sample_000000.mtis", "sample_000002.mtis"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_threaded_generation_identical(self, tmp_path, workdir, monkeypatch):
        cfg = str(workdir / "tiny.ini")
        a, b = tmp_path / "st", tmp_path / "mt"
        assert cli.main(["synth", "--config", cfg, "--out-dir", str(a), "--count", "4"]) == 0
        monkeypatch.setenv("MTI_THREADS", "3")
        assert cli.main(["synth", "--config", cfg, "--out-dir", str(b), "--count", "4"]) == 0
        for p in sorted(a.iterdir()):
            assert p.read_bytes() == (b / p.name).read_bytes()

    def test_invalid_h_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[data]\nH = 40\n")
        code = cli.main(["synth", "--config", str(bad), "--out-dir", str(tmp_path / "x"),
                         "--count", "1"])
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_deterministic_rerun(self, workdir, trained, tmp_path):
        ckpt1, log1 = trained
        ckpt2 = tmp_path / "again.mtic"
        log2 = tmp_path / "again.csv"
        code = cli.main(["train", "--config", str(workdir / "tiny.ini"),
                         "--data-dir", str(workdir / "data"),
                         "--out", str(ckpt2), "--log", str(log2), "--no-plot"])
        assert code == 0
        assert ckpt1.read_bytes() == ckpt2.read_bytes()
        assert log1.read_bytes() == log2.read_bytes()

    def test_log_schema(self, trained):
        _, log = trained
        with open(log, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "lr", "total_loss", "seg_final", "depth_final",
                           "seg_s4", "seg_s8", "depth_s4", "depth_s8",
                           "edge_s4", "edge_s8", "normals_s4", "normals_s8"]
        assert [r[0] for r in rows[1:]] == ["0", "2", "4", "5"]

    def test_plot_written(self, trained):
        _, log = trained
        assert log.with_suffix(".png").is_file()

    def test_missing_data_dir_exits_2(self, workdir, tmp_path):
        code = cli.main(["train", "--config", str(workdir / "tiny.ini"),
                         "--data-dir", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "m.mtic"), "--log", str(tmp_path / "l.csv")])
        assert code == 2


class TestEval:
    def test_metrics_rows_and_finite(self, workdir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "metrics.csv"
        code = cli.main(["eval", "--config", str(workdir / "tiny.ini"),
                         "--checkpoint", str(ckpt), "--data-dir", str(workdir / "data"),
                         "--out", str(out)])
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["model_id", "task", "metric", "value", "direction"]
        assert len(rows) == 3  # header + one row per target task
        assert {r[1] for r in rows[1:]} == {"seg", "depth"}
        assert all(np.isfinite(float(r[3])) for r in rows[1:])

    def test_rerun_byte_identical(self, workdir, trained, tmp_path):
        ckpt, _ = trained
        a, b = tmp_path / "m1.csv", tmp_path / "m2.csv"
        for out in (a, b):
            assert cli.main(["eval", "--config", str(workdir / "tiny.ini"),
                             "--checkpoint", str(ckpt), "--data-dir", str(workdir / "data"),
                             "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_config_checkpoint_exits_2(self, workdir, trained, tmp_path, capsys):
        ckpt, _ = trained
        other = tmp_path / "other.ini"
        other.write_text(TINY_CONFIG.replace("1/4:8,1/8:8", "1/4:12,1/8:12"))
        code = cli.main(["eval", "--config", str(other), "--checkpoint", str(ckpt),
                         "--data-dir", str(workdir / "data"), "--out", str(tmp_path / "m.csv")])
        assert code == 2


class TestDelta:
    @staticmethod
    def _write_metrics(path, model_id, seg, dep):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_id", "task", "metric", "value", "direction"])
            w.writerow([model_id, "seg", "miou", repr(seg), 0])
            w.writerow([model_id, "depth", "rmse", repr(dep), 1])

    def test_identity_zero(self, tmp_path):
        a = tmp_path / "a.csv"
        self._write_metrics(a, "m", 33.18, 0.667)
        out = tmp_path / "delta.csv"
        assert cli.main(["delta", "--model", str(a), "--baseline", str(a), "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "model_id,baseline_id,delta_m_percent"
        assert rows[1] == "m,m,0.00"

    def test_published_fixture(self, tmp_path):
        base = tmp_path / "st.csv"
        model = tmp_path / "mtl.csv"
        self._write_metrics(base, "st", 33.18, 0.667)
        self._write_metrics(model, "mtl", 32.09, 0.668)
        out = tmp_path / "delta.csv"
        assert cli.main(["delta", "--model", str(model), "--baseline", str(base),
                         "--out", str(out)]) == 0
        value = float(out.read_text().splitlines()[1].split(",")[2])
        assert value == pytest.approx(-1.72, abs=0.02)

    def test_mismatched_tasks_exit_2(self, tmp_path):
        base = tmp_path / "b.csv"
        self._write_metrics(base, "b", 1.0, 1.0)
        model = tmp_path / "m.csv"
        with open(model, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_id", "task", "metric", "value", "direction"])
            w.writerow(["m", "seg", "miou", "1.0", 0])
        assert cli.main(["delta", "--model", str(model), "--baseline", str(base),
                         "--out", str(tmp_path / "d.csv")]) == 2


class TestAffinity:
    def test_single_sample_matches_direct_call(self, workdir, tmp_path):
        single = tmp_path / "one"
        cfg = workdir / "tiny.ini"
        assert cli.main(["synth", "--config", str(cfg), "--out-dir", str(single),
                         "--count", "1"]) == 0
        out = tmp_path / "curve.csv"
        assert cli.main(["affinity", "--config", str(cfg), "--data-dir", str(single),
                         "--out", str(out)]) == 0
        _, samples = load_dataset(single)
        s = samples[0]
        rows = affinity_curve(
            {
                "seg": (s.seg.astype(np.int64), "categorical"),
                "depth": (s.depth.astype(np.float64), "regression"),
                "edge": (s.edge.astype(np.int64), "binary"),
            },
            AffinityConfig(dilations=(1, 2, 4, 8)),
        )
        with open(out, newline="") as fh:
            got = list(csv.reader(fh))[1:]
        assert len(got) == len(rows)
        for row, expect in zip(got, rows):
            assert row[0] == expect.task_a and row[1] == expect.task_b
            assert int(row[2]) == expect.dilation
            assert float(row[3]) == pytest.approx(expect.correspondence, abs=1e-12)
            assert int(row[4]) == expect.valid_pairs

    def test_rows_per_pair_and_plot(self, workdir, tmp_path):
        out = tmp_path / "curve.csv"
        assert cli.main(["affinity", "--config", str(workdir / "tiny.ini"),
                         "--data-dir", str(workdir / "data"), "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        # 3 label-space tasks -> 3 pairs x 4 dilations
        assert len(rows) == 12
        assert out.with_suffix(".png").is_file()

    def test_deterministic_outputs(self, workdir, tmp_path):
        cfg = str(workdir / "tiny.ini")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert cli.main(["affinity", "--config", cfg, "--data-dir",
                             str(workdir / "data"), "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.with_suffix(".png").read_bytes() == b.with_suffix(".png").read_bytes()

    def test_single_task_config_exits_2(self, workdir, tmp_path):
        solo = tmp_path / "solo.ini"
        solo.write_text(TINY_CONFIG.replace(
            "tasks = seg:target,depth:target,edge:auxiliary,normals:auxiliary",
            "tasks = seg:target,normals:auxiliary"))
        assert cli.main(["affinity", "--config", str(solo),
                         "--data-dir", str(workdir / "data"),
                         "--out", str(tmp_path / "c.csv")]) == 2


class TestAblate:
    def test_grid_schema_and_determinism(self, workdir, tmp_path):
        cfg = workdir / "tiny.ini"
        out1, out2 = tmp_path / "t1.csv", tmp_path / "t2.csv"
        for out in (out1, out2):
            assert cli.main(["ablate", "--config", str(cfg),
                             "--data-dir", str(workdir / "data"), "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        with open(out1, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["scales", "fpm", "seg_miou", "depth_rmse", "delta_m"]
        assert rows[1][0] == "single-task" and rows[1][1] == "n/a" and rows[1][4] == "0.00"
        assert [r[0] for r in rows[2:]] == ["1/4", "1/4+1/8"]
        assert rows[2][1] == "n/a" and rows[3][1] == "on"
        for r in rows[2:]:
            float(r[2]), float(r[3]), float(r[4])
        assert out1.with_suffix(".png").is_file()


class TestGradcheckCommand:
    def test_passes_on_single_scale_config(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "single.ini"
        cfg.write_text(SINGLE_SCALE_CONFIG)
        code = cli.main(["gradcheck", "--config", str(cfg), "--samples", "1"])
        out = capsys.readouterr().out
        assert code == 0
        lines = [l for l in out.splitlines() if "max_rel_err" in l]
        names = [l.split()[0] for l in lines]
        assert names == ["conv2d", "residual_block", "se_gate", "attention_transform",
                         "harmonization", "fpm", "aggregation", "ce_loss", "l1_loss",
                         "weighted_bce", "normal_loss", "end_to_end"]
        assert all("PASS" in l for l in lines)

    def test_corrupted_backward_exits_3(self, tmp_path, monkeypatch, capsys):
        real_relu = ops.relu

        def broken_relu(x):
            t = real_relu(x)
            if t._vjp is not None:
                orig = t._vjp
                t._vjp = lambda g: tuple(None if d is None else d * 1.01 for d in orig(g))
            return t

        monkeypatch.setattr(ops, "relu", broken_relu)
        cfg = tmp_path / "single.ini"
        cfg.write_text(SINGLE_SCALE_CONFIG)
        code = cli.main(["gradcheck", "--config", str(cfg), "--samples", "1"])
        assert code == 3
        assert "FAIL" in capsys.readouterr().out


class TestUsage:
    def test_unknown_command_exits_1(self, capsys):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_required_flag_exits_1(self, capsys):
        assert cli.main(["synth", "--count", "1"]) == 1

    def test_help_exits_0(self, capsys):
        assert cli.main(["--help"]) == 0
