import json
import os
import subprocess
import sys

import pytest

from astad.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps({
        "seed": 3, "train_samples": 10, "test_normal": 4, "test_anomalous": 4,
        "feature_channels": 4, "height": 8, "width": 8, "patch_size": 2,
    }))
    (root / "cfg.json").write_text(json.dumps({
        "epochs_teacher": 2, "epochs_student": 2, "seed": 1, "batch_size": 4,
        "c_pe": 4, "n_blocks": 2, "teacher_hidden": 8, "student_hidden": 8,
        "n_st_blocks": 1,
    }))
    return root


def run(root, *argv):
    cwd = os.getcwd()
    os.chdir(root)
    try:
        return main(list(argv))
    finally:
        os.chdir(cwd)


class TestPipeline:
    def test_synth_train_eval_smoke(self, workdir):
        assert run(workdir, "synth", "--config", "spec.json", "--out", "corpus") == 0
        assert (workdir / "corpus" / "train" / "manifest.json").exists()
        assert run(workdir, "train-teacher", "--corpus", "corpus",
                   "--config", "cfg.json", "--out", "run") == 0
        assert run(workdir, "train-student", "--corpus", "corpus",
                   "--teacher", "run/teacher.ckpt", "--config", "cfg.json",
                   "--out", "run") == 0
        assert run(workdir, "eval", "--corpus", "corpus",
                   "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt",
                   "--out", "report") == 0
        metrics = json.loads((workdir / "report" / "metrics.json").read_text())
        assert "image_auroc" in metrics and 0.0 <= metrics["image_auroc"] <= 1.0
        assert (workdir / "report" / "scores.csv").read_text().startswith("index,label,score")
        assert (workdir / "report" / "histogram.csv").exists()
        proj = (workdir / "report" / "projections.csv").read_text()
        assert proj.startswith("kind,label,u,v")

    def test_score_with_maps(self, workdir):
        assert run(workdir, "score", "--corpus", "corpus",
                   "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt",
                   "--out", "scores", "--maps") == 0
        pgms = [f for f in os.listdir(workdir / "scores") if f.endswith(".pgm")]
        assert len(pgms) == 8

    def test_toy_deterministic_outputs(self, workdir):
        (workdir / "toy.json").write_text(json.dumps({"steps": 40}))
        assert run(workdir, "toy", "--config", "toy.json", "--seed", "7", "--out", "toy1") == 0
        assert run(workdir, "toy", "--config", "toy.json", "--seed", "7", "--out", "toy2") == 0
        c1 = (workdir / "toy1" / "toy_curves.csv").read_bytes()
        c2 = (workdir / "toy2" / "toy_curves.csv").read_bytes()
        assert c1 == c2
        s1 = (workdir / "toy1" / "toy_summary.json").read_bytes()
        s2 = (workdir / "toy2" / "toy_summary.json").read_bytes()
        assert s1 == s2


class TestErrorPaths:
    def test_unknown_subcommand_exits_one(self, workdir):
        with pytest.raises(SystemExit) as exc:
            run(workdir, "frobnicate")
        assert exc.value.code == 1

    def test_unknown_flag_exits_one(self, workdir):
        with pytest.raises(SystemExit) as exc:
            run(workdir, "synth", "--nope", "x", "--out", "y")
        assert exc.value.code == 1

    def test_no_command_exits_one(self, workdir):
        assert run(workdir) == 1

    def test_missing_corpus_exits_one(self, workdir):
        assert run(workdir, "train-teacher", "--corpus", "missing", "--out", "x") == 1

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "astad.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "gradcheck" in proc.stdout
