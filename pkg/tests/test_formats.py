import numpy as np
import pytest

from gfpnet.cloud import PointCloud
from gfpnet.formats import (DatasetManifest, ManifestEntry, ManifestError, PlyError, load_manifest,
                            read_ply, save_manifest, write_ply)


def _write(path, text):
    path.write_text(text)
    return path


def test_minimal_ply(tmp_path):
    p = _write(tmp_path / "a.ply", "ply\nformat ascii 1.0\nelement vertex 1\n"
               "property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n")
    c = read_ply(p)
    assert len(c) == 1 and np.array_equal(c.points, [[0, 0, 0]])


def test_roundtrip_nine_digits(tmp_path):
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(1000, 3)) * 10)
    write_ply(c, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    expect = np.array([[float(f"{v:.9g}") for v in row] for row in c.points])
    assert np.array_equal(back.points, expect)


def test_float32_values_exact(tmp_path):
    pts = np.random.default_rng(1).normal(size=(200, 3)).astype(np.float32).astype(np.float64)
    write_ply(PointCloud(pts), tmp_path / "f.ply")
    back = read_ply(tmp_path / "f.ply").points
    assert np.array_equal(back.astype(np.float32), pts.astype(np.float32))


def test_vertex_count_mismatch(tmp_path):
    body = "\n".join(["0 0 0"] * 4)
    p = _write(tmp_path / "m.ply", "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\n"
               f"property float y\nproperty float z\nend_header\n{body}\n")
    with pytest.raises(PlyError, match="vertex count mismatch"):
        read_ply(p)


def test_binary_rejected(tmp_path):
    p = _write(tmp_path / "b.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
               "property float x\nproperty float y\nproperty float z\nend_header\n")
    with pytest.raises(PlyError, match="unsupported encoding"):
        read_ply(p)


def test_malformed_header_reports_line(tmp_path):
    p = _write(tmp_path / "h.ply", "ply\nformat ascii 1.0\nelement vertex 1\nbogus\nend_header\n0 0 0\n")
    with pytest.raises(PlyError, match="line 4"):
        read_ply(p)


def test_write_empty_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty cloud"):
        write_ply(PointCloud(np.zeros((0, 3))), tmp_path / "e.ply")


def test_write_deterministic_and_normals(tmp_path):
    c = PointCloud([[0, 0, 1], [1, 0, 0]], [[0, 0, 1], [1, 0, 0]])
    write_ply(c, tmp_path / "1.ply")
    write_ply(c, tmp_path / "2.ply")
    a, b = (tmp_path / "1.ply").read_bytes(), (tmp_path / "2.ply").read_bytes()
    assert a == b
    assert a.decode().count("property") == 6
    back = read_ply(tmp_path / "1.ply")
    assert np.array_equal(back.normals, c.normals)


def _entries(tmp_path):
    for name in ("s.ply", "t.ply", "l.ply"):
        write_ply(PointCloud([[0, 0, 0]]), tmp_path / name)
    return [ManifestEntry("car_001", "car", "s.ply", "t.ply", "l.ply", "train"),
            ManifestEntry("car_002", "car", "s.ply", "t.ply", None, "test"),
            ManifestEntry("bike_001", "bike", "s.ply", "t.ply", "l.ply", "test")]


def test_manifest_empty_file(tmp_path):
    assert len(load_manifest(_write(tmp_path / "m.tsv", ""))) == 0


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest(_entries(tmp_path))
    save_manifest(m, tmp_path / "m.tsv")
    assert load_manifest(tmp_path / "m.tsv") == m
    assert [e.sample_id for e in m.split("test")] == ["car_002", "bike_001"]


def test_manifest_duplicate_id(tmp_path):
    _entries(tmp_path)
    line = "car_001\tcar\ts.ply\tt.ply\tl.ply\ttrain\n"
    with pytest.raises(ManifestError, match="duplicate sample_id car_001"):
        load_manifest(_write(tmp_path / "m.tsv", line * 2))


def test_manifest_unknown_split_and_missing_file(tmp_path):
    _entries(tmp_path)
    with pytest.raises(ManifestError, match="unknown split"):
        load_manifest(_write(tmp_path / "a.tsv", "x\tcar\ts.ply\tt.ply\t\tval\n"))
    with pytest.raises(ManifestError, match="missing file"):
        load_manifest(_write(tmp_path / "b.tsv", "x\tcar\tnope.ply\tt.ply\t\ttrain\n"))
