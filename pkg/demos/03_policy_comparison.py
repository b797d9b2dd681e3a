"""
Comparing duty-cycling policies
===============================

Every policy sees the same deployments, harvest draws and events (paired
seeds), so differences come from the policies alone.  The run is short; use
the CLI with 100 replications of 10^4 TTIs for tighter estimates.
"""
from ehiot.model import SimConfig
from ehiot.policy import AdjustedFactory, SimpleFactory, adjusted_duty_cycling_search
from ehiot.sim import monte_carlo

cfg = SimConfig(n_devices=150, horizon=3000, replications=4, seed=11)
search = adjusted_duty_cycling_search(cfg, replications=3, horizon=1000)
print("adjusted search picked (t_on, t_drx) =", (search.t_on, search.t_drx), "feasible:", search.feasible)

factories = {
    "random": SimpleFactory("random"),
    "knn": SimpleFactory("knn"),
    "adjusted": AdjustedFactory(search.t_on, search.t_drx),
    "genie": SimpleFactory("genie"),
}
print(f"{'policy':<9} {'info/event':>10} {'misdetect':>10} {'energy':>8} {'wake/ev':>8} {'wrong/ev':>8}")
for name, f in factories.items():
    s = monte_carlo(cfg, f)
    print(f"{name:<9} {s.mean('info_per_event'):>10.4f} {s.mean('misdetection_rate'):>10.3f} "
          f"{s.mean('energy_per_device_tti'):>8.4f} {s.mean('wakeups_per_event'):>8.3f} "
          f"{s.mean('wrong_activations_per_event'):>8.3f}")
