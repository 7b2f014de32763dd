import csv
import json

import numpy as np
import pytest

from multireg.cli import main

SMALL = ["--d", "8", "--T", "2", "--train-scenes", "3", "--epochs-sync", "2", "--train-n-min", "4",
         "--train-n-max", "6", "--overlap-samples", "300", "--overlap-width", "16"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path):
    flags = SMALL + ["--out", tmp_path, "--overlap-checkpoint", tmp_path / "overlap.mdgd",
                     "--sync-checkpoint", tmp_path / "sync.mdgd"]
    return tmp_path, flags


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_writes_scenes_stats_and_frames(workdir):
    tmp, flags = workdir
    assert run("synth", "--suite", "easy", "--stats", 20, "--frames", 3, *flags) == 0
    assert len(list(tmp.glob("easy_*.graph.json"))) == 50
    assert len(json.loads((tmp / "stats_dataset.json").read_text())) == 20
    assert len(list(tmp.glob("frame_*.mdsc"))) == 3


def test_training_logs_one_row_per_step(workdir):
    tmp, flags = workdir
    assert run("train-overlap", *flags) == 0
    assert len(rows(tmp / "overlap_loss.csv")) == 10  # ceil(300 / 32)
    assert run("train-sync", *flags) == 0
    log = rows(tmp / "sync_loss.csv")
    assert [int(r["step"]) for r in log] == list(range(1, 7))
    assert all(np.isfinite(float(r["loss"])) for r in log)


def test_resume_reproduces_uninterrupted_checkpoint(workdir):
    tmp, flags = workdir
    assert run("train-sync", *flags) == 0
    full = (tmp / "sync.mdgd").read_bytes()
    part = flags + ["--sync-checkpoint", tmp / "part.mdgd"]
    assert run("train-sync", "--max-steps", 4, *part) == 0
    assert run("train-sync", "--resume", tmp / "part.mdgd", *part) == 0
    assert (tmp / "part.mdgd").read_bytes() == full
    assert [int(r["step"]) for r in rows(tmp / "sync_loss.csv")] == list(range(1, 7))


def test_register_evaluate_report_and_determinism(workdir):
    tmp, flags = workdir
    assert run("synth", "--suite", "easy", *flags) == 0
    assert run("train-sync", *flags) == 0
    scenes = [tmp / "easy_000", tmp / "easy_001"]
    assert run("register", "--graph", "full", "--scene", *scenes, "--dump-intermediates", *flags) == 0
    first = (tmp / "easy_000.report.json").read_bytes()
    assert run("register", "--graph", "full", "--scene", *scenes, *flags) == 0
    assert (tmp / "easy_000.report.json").read_bytes() == first
    assert "weights" in json.loads((tmp / "easy_000.intermediates.json").read_text())
    out = tmp / "eval.json"
    assert run("evaluate", "--pred", tmp / "easy_000.poses.json", "--gt", tmp / "easy_000.gt.json",
               "--output", out, *flags) == 0
    assert json.loads(out.read_text())["rr"] == json.loads(first)["rr"]
    assert run("report", tmp / "easy_000.report.json", tmp / "easy_001.report.json", "--csv", tmp / "t.csv",
               *flags) == 0
    assert len((tmp / "t.csv").read_text().splitlines()) == 4


def test_register_descriptor_frames(workdir, capsys):
    tmp, flags = workdir
    assert run("synth", "--frames", 3, *flags) == 0
    assert run("train-overlap", *flags) == 0
    assert run("train-sync", *flags) == 0
    frames = sorted(tmp.glob("frame_*.mdsc"))
    assert run("register", "--frames", *frames, "--gt", tmp / "frames.gt.json", "--graph", "full",
               "--dump-intermediates", *flags) == 0
    dump = json.loads((tmp / "frames.intermediates.json").read_text())
    assert dump["selected_pairs"] == [[0, 1], [0, 2], [1, 2]]
    assert "RR=" in capsys.readouterr().out


def test_missing_checkpoint_is_a_stage_tagged_error(workdir, capsys):
    tmp, flags = workdir
    assert run("register", "--suite", "easy", *flags) == 2
    assert "[load]" in capsys.readouterr().err


def test_bad_config_file(workdir, capsys):
    tmp, flags = workdir
    (tmp / "c.json").write_text('{"bogus": 1}')
    assert run("synth", "--config", tmp / "c.json", *flags) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_file_and_flags_compose(workdir):
    tmp, flags = workdir
    (tmp / "c.json").write_text(json.dumps({"seed": 9, "out": str(tmp / "elsewhere")}))
    assert run("synth", "--stats", 5, "--config", tmp / "c.json") == 0
    assert (tmp / "elsewhere" / "stats_dataset.json").exists()


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seeds", 1) == 0
    assert "PASS motion_loss" in capsys.readouterr().out
