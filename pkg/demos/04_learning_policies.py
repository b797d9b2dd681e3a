"""
Learned policies
================

The Q-learning policy keeps two small tables shared by all devices: one
decides who stays awake, the other whom to wake after a report.  The decision
transformer clones the top quarter (by return) of logged KNN/random episodes through a
single attention layer.  Both are trained briefly here.
"""
from ehiot.dt import DtConfig, DtFactory, train_dt_policy
from ehiot.model import SimConfig
from ehiot.policy import SimpleFactory
from ehiot.rl import FrozenRlFactory, RlConfig, train_rl
from ehiot.sim import monte_carlo

cfg = SimConfig(n_devices=100, horizon=3000, replications=3, seed=5)

rl = train_rl(cfg, RlConfig(episodes=8, horizon=1500))
print("RL mean stage-1 reward per episode:", [round(r, 2) for r in rl.curve])

dt = train_dt_policy(cfg, DtConfig(epochs=60), episodes=6, horizon=400)
print(f"DT loss {dt.loss_curve[0]:.4f} -> {dt.loss_curve[-1]:.4f}, closed-loop threshold {dt.theta:.3f}")

for name, f in [("random", SimpleFactory("random")), ("knn", SimpleFactory("knn")),
                ("rl", FrozenRlFactory.from_policy(rl.policy)), ("dt", DtFactory(dt))]:
    s = monte_carlo(cfg, f)
    print(f"{name:<7} info/event {s.mean('info_per_event'):.4f}  energy {s.mean('energy_per_device_tti'):.4f}")
