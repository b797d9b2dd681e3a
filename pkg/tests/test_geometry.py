import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from conftest import fixed_deployment
from ehiot.geometry import (
    conditional_activation,
    coverage_radius,
    deploy,
    expected_min_information,
    grid_min_information,
    grid_positions,
    knn_clusters,
    n_clusters,
    read_deployment_csv,
    voronoi_cells,
    write_deployment_csv,
)
from ehiot.model import Layout, SimConfig


def shoelace(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def quad_activation(d, g):
    f = lambda phi: math.exp(-math.sqrt(max(d * d + g * g - 2 * d * g * math.cos(phi), 0.0)))
    return quad(f, 0, 2 * math.pi, limit=200, points=[0.0])[0] / (2 * math.pi)


def test_grid_floor_closed_form():
    dep = deploy(SimConfig(n_devices=100, layout=Layout.GRID), np.random.default_rng(0))
    assert coverage_radius(dep) == pytest.approx(math.sqrt(2), abs=1e-9)
    assert expected_min_information(dep) == pytest.approx(0.2431167344342142, abs=1e-9)
    assert grid_min_information(400, 100) == pytest.approx(0.2431167344342142, abs=1e-15)


def test_four_device_grid_cells():
    cells = voronoi_cells(fixed_deployment(grid_positions(4, 20)))
    for c in cells:
        assert shoelace(c.vertices) == pytest.approx(100.0)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_cells_tile_the_square(n, seed):
    pts = np.random.default_rng(seed).uniform(0, 20, size=(n, 2))
    cells = voronoi_cells(fixed_deployment(pts))
    assert sum(shoelace(c.vertices) for c in cells) == pytest.approx(400.0, rel=1e-9)


def test_duplicate_sites_rejected():
    with pytest.raises(ValueError):
        voronoi_cells(fixed_deployment([[1, 1], [1, 1]]))


def test_cluster_count():
    assert n_clusters(400, 4) == 8


def test_knn_recovers_separated_blobs():
    rng = np.random.default_rng(3)
    centers = np.array([[3, 3], [17, 3], [10, 17]])
    pts = np.vstack([c + rng.normal(0, 0.5, size=(10, 2)) for c in centers])
    a = knn_clusters(fixed_deployment(pts), 3, rng=np.random.default_rng(0))
    assert a.m == 3
    for b in range(3):
        assert len(set(a.labels[b * 10:(b + 1) * 10])) == 1


@given(st.integers(2, 60), st.integers(1, 10), st.integers(0, 1000))
def test_knn_partition(n, m, seed):
    m = min(m, n)
    pts = np.random.default_rng(seed).uniform(0, 20, size=(n, 2))
    a = knn_clusters(fixed_deployment(pts), m, rng=np.random.default_rng(seed))
    members = np.sort(np.concatenate(a.clusters))
    assert members.tolist() == list(range(n))
    assert 1 <= a.m <= m
    b = knn_clusters(fixed_deployment(pts), m, rng=np.random.default_rng(seed))
    assert np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("d,g", [(2, 3), (0.5, 1), (3, 0.2), (2, 2)])
def test_activation_matches_adaptive_quadrature(d, g):
    assert conditional_activation(d, g) == pytest.approx(quad_activation(d, g), abs=2e-5)


def test_activation_reference_values():
    assert conditional_activation(2, 3) == pytest.approx(0.08396039033180928, abs=1e-12)
    assert conditional_activation(0.0, 1.5) == pytest.approx(math.exp(-1.5))
    assert conditional_activation(1.5, 0.0) == pytest.approx(math.exp(-1.5))


def test_deployment_csv_round_trip(tmp_path):
    dep = deploy(SimConfig(n_devices=12), np.random.default_rng(5))
    write_deployment_csv(dep, tmp_path / "d.csv")
    back = read_deployment_csv(tmp_path / "d.csv", 20.0)
    np.testing.assert_allclose(back.positions, dep.positions, rtol=1e-8)
