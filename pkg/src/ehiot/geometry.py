"""Deployments, Voronoi coverage, KNN clustering and spatial activation correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Voronoi, cKDTree

from .model import Layout, SimConfig, sensing_probability


@dataclass(frozen=True)
class Deployment:
    positions: np.ndarray  # (N, 2), metres
    area_side: float
    layout: Layout = Layout.UNIFORM_RANDOM

    @property
    def n(self) -> int:
        return len(self.positions)

    def distances_to(self, point) -> np.ndarray:
        return np.hypot(self.positions[:, 0] - point[0], self.positions[:, 1] - point[1])

    def pairwise(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


def grid_positions(n: int, side: float) -> np.ndarray:
    m = math.ceil(math.sqrt(n))
    centers = (np.arange(m) + 0.5) * side / m
    xs, ys = np.meshgrid(centers, centers, indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel()])[:n]


def deploy(cfg: SimConfig, rng: np.random.Generator) -> Deployment:
    """Place ``cfg.n_devices`` devices in the square area."""
    n = cfg.n_devices
    if cfg.layout is Layout.GRID:
        pos = grid_positions(n, cfg.area_side)
        if len(np.unique(pos, axis=0)) < n:
            raise ValueError(f"{n} devices do not fit on distinct grid positions")
    else:
        pos = rng.uniform(0.0, cfg.area_side, size=(n, 2))
    return Deployment(pos, cfg.area_side, cfg.layout)


def write_deployment_csv(dep: Deployment, path) -> None:
    with open(path, "w") as fh:
        fh.write("id,x,y\n")
        for j, (x, y) in enumerate(dep.positions):
            fh.write(f"{j},{x:.9g},{y:.9g}\n")


def read_deployment_csv(path, area_side: float) -> Deployment:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    return Deployment(data[order, 1:3].copy(), area_side)


@dataclass(frozen=True)
class VoronoiCell:
    site: int
    vertices: np.ndarray  # (k, 2), counter-clockwise


def voronoi_cells(dep: Deployment) -> list[VoronoiCell]:
    """Voronoi cells of the devices, clipped to the deployment square.

    The sites are mirrored across the four sides of the square, which makes
    every original cell bounded and exactly equal to its clipped version.
    """
    pts = np.asarray(dep.positions, dtype=float)
    n = len(pts)
    if n == 0:
        raise ValueError("need at least one site")
    if len(np.unique(pts, axis=0)) < n:
        raise ValueError("duplicate sites")
    L = dep.area_side
    mirrored = [pts]
    for axis, wall in ((0, 0.0), (0, L), (1, 0.0), (1, L)):
        m = pts.copy()
        m[:, axis] = 2 * wall - m[:, axis]
        mirrored.append(m)
    vor = Voronoi(np.vstack(mirrored))
    cells = []
    for j in range(n):
        region = vor.regions[vor.point_region[j]]
        verts = np.clip(vor.vertices[region], 0.0, L)
        c = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - c[1], verts[:, 0] - c[0]))
        cells.append(VoronoiCell(j, verts[order]))
    return cells


def coverage_radius(dep: Deployment) -> float:
    """Largest site-to-own-vertex distance over all clipped Voronoi cells."""
    return max(
        float(np.max(np.hypot(*(cell.vertices - dep.positions[cell.site]).T)))
        for cell in voronoi_cells(dep)
    )


def expected_min_information(dep: Deployment, decay: float = 1.0, psi: float = 1.0) -> float:
    """Information floor ``psi * p(d*)`` with ``d*`` the coverage radius."""
    return psi * sensing_probability(coverage_radius(dep), decay)


def grid_min_information(area: float, n: int, decay: float = 1.0, psi: float = 1.0) -> float:
    """Closed form of the floor for a square grid: ``psi * p(sqrt(area / 2N))``."""
    return psi * sensing_probability(math.sqrt(area / (2 * n)), decay)


def n_clusters(area: float, d_max: float) -> int:
    return math.ceil(area / (math.pi * d_max**2))


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # cluster id per device
    clusters: tuple  # tuple of member-index arrays, ascending
    iterations: int

    @property
    def m(self) -> int:
        return len(self.clusters)

    def rotation_order(self, c: int) -> np.ndarray:
        return self.clusters[c]


def _relabel(labels: np.ndarray) -> tuple[np.ndarray, tuple]:
    uniq = np.unique(labels)
    remap = {old: new for new, old in enumerate(uniq)}
    labels = np.array([remap[v] for v in labels], dtype=int)
    return labels, tuple(np.flatnonzero(labels == c) for c in range(len(uniq)))


def knn_clusters(dep: Deployment, m: int, k_neighbors: int = 3, rng: np.random.Generator | None = None,
                 max_iters: int = 100, n_init: int = 5) -> ClusterAssignment:
    """Partition devices into ``m`` spatial clusters.

    Each round computes distances to the current centroids, lets every
    device vote with its ``k_neighbors`` nearest neighbours (plus itself) for
    the cluster whose centroid is nearest to each voter, and moves the device
    to the majority cluster.  Ties go to the candidate with the nearest
    centroid.  Centroids are then updated, until the labels stop changing.
    A cluster that loses every vote is dissolved: its former members have
    already moved to their nearest surviving cluster.
    Of ``n_init`` random starts, the one with the fewest empty clusters wins,
    then the one with the lowest within-cluster scatter.
    """
    n = dep.n
    if m < 1 or k_neighbors < 1:
        raise ValueError("m and k_neighbors must be >= 1")
    if m > n:
        raise ValueError(f"cannot form {m} clusters from {n} devices")
    rng = np.random.default_rng(0) if rng is None else rng
    pts = dep.positions
    k = min(k_neighbors, n - 1)
    if k > 0:
        _, nbrs = cKDTree(pts).query(pts, k=k + 1)
        voters = np.atleast_2d(nbrs)  # includes the device itself
    else:
        voters = np.arange(n)[:, None]

    best = None
    for _ in range(n_init):
        labels = rng.permutation(np.arange(n) % m)
        it = 0
        for it in range(1, max_iters + 1):
            cent = _centroids(pts, labels, m)
            d2 = ((pts[:, None, :] - cent[None, :, :]) ** 2).sum(-1)
            d2[:, np.isnan(cent[:, 0])] = np.inf
            nearest = np.argmin(d2, axis=1)
            votes = nearest[voters]
            counts = np.zeros((n, m), dtype=int)
            np.add.at(counts, (np.repeat(np.arange(n), votes.shape[1]), votes.ravel()), 1)
            top = counts == counts.max(axis=1, keepdims=True)
            new = np.argmin(np.where(top, d2, np.inf), axis=1)
            if np.array_equal(new, labels):
                break
            labels = new
        cent = _centroids(pts, labels, m)
        # fewer empty clusters first, then lower scatter
        score = (-len(np.unique(labels)), float(((pts - cent[labels]) ** 2).sum()))
        if best is None or score < best[0]:
            best = (score, labels, it)
    labels, clusters = _relabel(best[1])
    return ClusterAssignment(labels, clusters, best[2])


def _centroids(pts, labels, m):
    cent = np.full((m, 2), np.nan)
    for c in range(m):
        members = labels == c
        if members.any():
            cent[c] = pts[members].mean(axis=0)
    return cent


def conditional_activation(d_ih, gamma, decay: float = 1.0, n_points: int = 256):
    """Sensing probability at a device ``gamma`` metres from a reporter that is
    ``d_ih`` metres from the epicenter, averaged over a uniform bearing.

    Midpoint quadrature over the bearing; broadcasts over array inputs.
    """
    d = np.asarray(d_ih, dtype=float)[..., None]
    g = np.asarray(gamma, dtype=float)[..., None]
    phi = (np.arange(n_points) + 0.5) * (2 * math.pi / n_points)
    dist2 = np.maximum(d * d + g * g - 2 * d * g * np.cos(phi), 0.0)
    out = np.exp(-decay * np.sqrt(dist2)).mean(axis=-1)
    return float(out) if out.ndim == 0 else out
