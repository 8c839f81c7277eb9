import math

import numpy as np
import pytest

from thinsurf.core import (AugmentedDataset, Config, ConfigError, DataError, PointCloud,
                           TriangleMesh, format_config, load_mesh, load_point_cloud,
                           parse_config, save_mesh, save_point_cloud)


def test_xyz_three_points(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0\n")
    cloud = load_point_cloud(p)
    assert cloud.n == 3
    assert cloud.normals is None
    np.testing.assert_array_equal(cloud.points[1], [1, 0, 0])


def test_xyz_with_normals(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0 0 0 1\n1 0 0 0 0 -1\n")
    cloud = load_point_cloud(p)
    np.testing.assert_array_equal(cloud.normals[:, 2], [1, -1])


def test_ply_with_normals(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float nx\nproperty float ny\nproperty float nz\n"
                 "end_header\n0 0 0 0 0 1\n1 2 3 1 0 0\n")
    cloud = load_point_cloud(p)
    assert cloud.n == 2
    np.testing.assert_array_equal(cloud.normals, [[0, 0, 1], [1, 0, 0]])


def test_nan_coordinate_rejected(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\nnan 1 2\n")
    with pytest.raises(DataError, match="line 2"):
        load_point_cloud(p)


def test_point_cloud_rejects_non_unit_normals():
    with pytest.raises(DataError):
        PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))


def test_single_triangle_obj(tmp_path):
    mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    p = tmp_path / "t.obj"
    save_mesh(mesh, p)
    lines = p.read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == 3
    assert sum(line.startswith("f ") for line in lines) == 1


def test_ply_carries_vertex_scalars(tmp_path):
    mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]), {"curvature": [1.0, 2.0, 3.0]})
    p = tmp_path / "t.ply"
    save_mesh(mesh, p)
    header = p.read_text().split("end_header")[0]
    assert "property double curvature" in header
    back = load_mesh(p)
    np.testing.assert_allclose(back.vertex_scalars["curvature"], [1, 2, 3])


@pytest.mark.parametrize("suffix", [".obj", ".ply"])
def test_empty_mesh_round_trip(tmp_path, suffix):
    mesh = TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=int))
    p = tmp_path / f"e{suffix}"
    save_mesh(mesh, p)
    back = load_mesh(p)
    assert back.n_vertices == 0 and back.n_triangles == 0


@pytest.mark.parametrize("suffix", [".obj", ".ply"])
def test_mesh_round_trip(tmp_path, rng, suffix):
    verts = rng.normal(size=(20, 3)) * 100
    tris = np.array([rng.choice(20, 3, replace=False) for _ in range(30)])
    mesh = TriangleMesh(verts, tris)
    p = tmp_path / f"m{suffix}"
    save_mesh(mesh, p)
    back = load_mesh(p)
    np.testing.assert_array_equal(back.triangles, tris)
    np.testing.assert_allclose(back.vertices, verts, atol=1e-6)


def test_point_cloud_round_trip(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    p = tmp_path / "c.xyz"
    save_point_cloud(PointCloud(pts, nrm), p)
    back = load_point_cloud(p)
    np.testing.assert_allclose(back.points, pts, atol=1e-6)
    np.testing.assert_allclose(back.normals, nrm, atol=1e-6)


def test_degenerate_triangle_rejected():
    with pytest.raises(DataError):
        TriangleMesh(np.eye(3), np.array([[0, 0, 1]]))


def test_augmented_values_must_match_kind():
    with pytest.raises(DataError):
        AugmentedDataset(np.zeros((2, 3)), [0.0, 0.5], [0, 1], [0, 0], 1.0)


def test_config_defaults_follow_capsicum_table():
    c = Config()
    assert (c.denoiseNbrs, c.denoiseThreshold, c.gridStep, c.pcaNbrs) == (50, 0.15, 0.5, 50)
    assert (c.coarseGridStep, c.graphNbrs, c.nMin, c.nMax, c.expand) == (2.0, 10, 2000, 5000, 1.1)
    assert c.L == 1.0
    assert c.smoothing == 1e-3


@pytest.mark.parametrize("changes", [
    {"nMin": 10, "nMax": 5},
    {"splineOrder": 1, "dimension": 3},
    {"smoothing": -1.0},
    {"smoothing": "fast"},
    {"expand": 0.9},
    {"gridStep": 0.0},
    {"weightKernel": "C9"},
    {"rhoMin": 1.0, "rhoMax": 0.1},
])
def test_config_rejects_invalid(changes):
    with pytest.raises(ConfigError):
        Config(**changes)


def test_config_text_round_trip():
    c = Config(gridStep=0.1, smoothing="gcv", alpha=0.6)
    back = parse_config(format_config(c))
    assert back.as_dict() == c.as_dict()


def test_config_parse_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("bogus = 1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("nMin = 1\nnMin = 2\n")
    c = parse_config("# comment\nnMin = 10  # trailing\n")
    assert c.nMin == 10 and math.isclose(c.gridStep, 0.5)


def test_point_cloud_ply_round_trip(tmp_path):
    pts = np.random.default_rng(3).random((20, 3))
    nrm = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    save_point_cloud(PointCloud(pts, nrm), tmp_path / "c.ply")
    back = load_point_cloud(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_allclose(back.normals, nrm, atol=1e-15)
