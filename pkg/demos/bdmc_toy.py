"""BDMC sandwich on data simulated from a trained toy decoder.

Forward AIS gives a stochastic lower bound on log p(x) and reverse AIS from
the simulating latent gives an upper bound; the gap between them shrinks as
the annealing schedule gets longer.

    python demos/bdmc_toy.py
"""
import numpy as np

from vaegaps.ais import Schedule, bdmc, simulate
from vaegaps.harness import experiments as ex
from vaegaps.harness.config import preset
from vaegaps.harness.training import train

cfg = preset("viz2d")
cfg.data.side = 16
model = train(cfg, ex.load_dataset(cfg.data)).model

data = simulate(model, 20, np.random.default_rng(0))
for n in (10, 100, 300):
    r = bdmc(model, 20, Schedule.linear(n), 16, np.random.default_rng(n), data=data)
    print(f"{n:>4} intermediates: lower {r.lower:.3f}  upper {r.upper:.3f}  gap {r.gap:.3f}")
