"""
Battery levels as a Markov chain
================================

A device harvests one quantum E_B with probability lambda*tau*exp(-lambda*tau)
per TTI and then pays for what it did.  The battery level is a Markov chain
whose stationary vector gives the probability that a transmission is
affordable.
"""
import numpy as np

from ehiot.cli import break_even_rate, mean_harvest
from ehiot.energy import availability_probability, build_battery_chain, stationary_distribution
from ehiot.model import SimConfig

# a device that senses half the time and reports on 15% of TTIs
spend = {1: 0.5, 11: 0.15, 1 / 14: 0.35}
for lam, eb in [(0.5, 5.0), (1.0, 5.0), (1.0, 10.0)]:
    cfg = SimConfig(eh_rate=lam, e_b=eb)
    chain = build_battery_chain(cfg, spend)
    b = stationary_distribution(chain)
    print(f"lambda={lam:<4} E_B={eb:<5} harvest/TTI={mean_harvest(lam, eb):.3f} "
          f"Pr(B >= E_tx)={availability_probability(chain, cfg.e_tx):.3f} "
          f"mean level={float(b @ chain.levels):.1f}")

# Mean harvest peaks at lambda = 1/tau, so a consumption above E_B/e can never be sustained.
for cons in (0.15, 0.19, 0.30, 0.40):
    lam = break_even_rate(cons, 1.0)
    print(f"consumption {cons:.2f}: break-even lambda for E_B=1 is "
          + ("unreachable" if lam is None else f"{lam:.3f}"))

lams = np.linspace(0.05, 1.0, 8)
print("net energy with E_B=1 against a 0.19 consumption:",
      np.round([mean_harvest(x, 1.0) - 0.19 for x in lams], 3))
