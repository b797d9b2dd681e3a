"""Small builders shared by the simulator-facing tests."""
import numpy as np

from ehiot.geometry import Deployment
from ehiot.sim import World


def scripted_world(cfg, points, epicenter=None, every=1, seed=0):
    """World with fixed positions; when ``epicenter`` is given, an event lands
    there on every ``every``-th TTI and nowhere else."""
    dep = Deployment(np.asarray(points, dtype=float), cfg.area_side)
    w = World(cfg, seed, deployment=dep)
    if epicenter is not None:
        fx, fy = epicenter[0] / cfg.area_side, epicenter[1] / cfg.area_side
        w.event_row = lambda k: np.array([0.0 if k % every == 0 else 1.0, fx, fy])
    return w
