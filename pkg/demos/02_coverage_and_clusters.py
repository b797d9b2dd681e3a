"""
Coverage floor and spatial clusters
===================================

The worst distance between a device and a corner of its Voronoi cell bounds
the information the nearest device can capture: E(I_min) = psi * p(d*).  The
KNN policy splits the area into ceil(area / (pi d_max^2)) clusters and lets
one member per cluster sense in each TTI.
"""
import numpy as np

from ehiot.geometry import coverage_radius, deploy, expected_min_information, knn_clusters, n_clusters
from ehiot.model import Layout, SimConfig

for n in (25, 100, 250):
    grid = deploy(SimConfig(n_devices=n, layout=Layout.GRID), np.random.default_rng(0))
    floors = [expected_min_information(deploy(SimConfig(n_devices=n), np.random.default_rng(s)))
              for s in range(20)]
    print(f"N={n:<4} grid d*={coverage_radius(grid):.3f} floor={expected_min_information(grid):.3f}   "
          f"random layouts: floor {np.mean(floors):.3f} +/- {np.std(floors):.3f}")

cfg = SimConfig(n_devices=250)
dep = deploy(cfg, np.random.default_rng(1))
m = n_clusters(cfg.area, cfg.d_max)
clusters = knn_clusters(dep, m, rng=np.random.default_rng(1))
sizes = sorted(len(c) for c in clusters.clusters)
print(f"{m} clusters requested, {clusters.m} formed after {clusters.iterations} rounds; sizes {sizes}")
print("each device therefore senses about once every", round(np.mean(sizes)), "TTIs")
