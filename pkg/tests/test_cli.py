import numpy as np
import pytest

from gfpnet.cli import main, read_config, UsageError
from gfpnet.cloud import PointCloud
from gfpnet.formats import read_ply, write_ply
from gfpnet.gp import load_gp
from gfpnet.shapes import car_like


def test_bad_flag_exit_2(capsys):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2


def test_seed_required(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("")
    assert main(["train", "--manifest", str(tmp_path / "m.tsv")]) == 2
    assert "--seed is required" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("")
    assert main(["train", "--manifest", str(tmp_path / "m.tsv"), "--seed", "1"]) == 1
    err = capsys.readouterr().err.strip()
    assert "train split is empty" in err and len(err.splitlines()) == 1


def test_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nseed = 3\nbatch-size = 16\n")
    assert read_config(cfg) == {"seed": 3, "batch_size": 16}
    cfg.write_text("nope = 1\n")
    with pytest.raises(UsageError):
        read_config(cfg)


def test_build_gp_command(tmp_path):
    d = tmp_path / "shapes"
    d.mkdir()
    for k in range(2):
        write_ply(car_like(80, seed=k), d / f"car{k}.ply")
    out = tmp_path / "car_gp.ply"
    assert main(["build-gp", "--shapes", str(d), "--class", "car", "--out", str(out), "--points", "300"]) == 0
    gp = load_gp(out)
    assert gp.class_name == "car" and gp.source_count == 2


def test_toy_pipeline_end_to_end(tmp_path):
    data = tmp_path / "toy"
    common = ["--seed", "7"]
    assert main(["make-dataset", "--toy", "--out", str(data), "--toy-patches", "40",
                 "--toy-test-shapes", "1", "--n-views", "2", *common]) == 0
    for k in (1, 2):
        assert main(["train", "--manifest", str(data / "manifest.tsv"), "--epochs", "1", "--batch-size", "20",
                     "--out", str(tmp_path / f"m{k}.bin"), *common]) == 0
    assert (tmp_path / "m1.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    obs = sorted((data / "test").glob("*_obs.ply"))[0]
    assert main(["complete", "--gp", str(data / "ellipsoid_gp.ply"), "--obs", str(obs), "--ckpt",
                 str(tmp_path / "m1.bin"), "--iters", "5", "--out", str(tmp_path / "mgp.ply")]) == 0
    assert len(read_ply(tmp_path / "mgp.ply")) == len(load_gp(data / "ellipsoid_gp.ply").cloud)
    assert main(["evaluate", "--manifest", str(data / "manifest.tsv"), "--ckpt", str(tmp_path / "m1.bin"),
                 "--iters", "1", "--out", str(tmp_path / "r.tsv"), "--no-baselines"]) == 0
    rows = (tmp_path / "r.tsv").read_text().splitlines()
    assert rows[0] == "sample_id\tclass\tCD\tF\tMMD\tC" and len(rows) == 1 + 2 + 1 + 2


def test_selftest_command(monkeypatch, capsys):
    import gfpnet.selftest as st

    quick_oracle, quick_grad = st.oracle_suite, st.gradient_suite
    monkeypatch.setattr(st, "oracle_suite", lambda: quick_oracle(5))
    monkeypatch.setattr(st, "gradient_suite", lambda: quick_grad(range(1)))
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "oracle: 15/15 passed" in out and "gradient: 1/1 passed" in out
