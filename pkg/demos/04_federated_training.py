"""End-to-end federated training on a synthetic low-rank dataset."""

import math
from dataclasses import replace

from fedgnn.config import TrainConfig
from fedgnn.data import split_dataset, synth_low_rank
from fedgnn.server import Simulation

ds = synth_low_rank(n_users=200, n_items=200, rank=4, density=0.3, seed=0)
train, val, test = split_dataset(ds, 0.8, 0.1, seed=0)
print(f"{ds.n_users} users, {ds.n_items} items, {len(train)} training ratings")

base = TrainConfig(variant="ggnn", round_size=1, lr=10.0, dim=4, dropout=0.0, m=0, lam=0.0,
                   delta=math.inf, expansion=False)

# without protection, then with noise; at this large step size even small noise
# swamps the signal, which is the utility cost the privacy knobs trade against
for cfg in (base, replace(base, delta=0.1, lam=0.01), replace(base, delta=0.1, lam=0.1, m=20)):
    sim = Simulation(cfg, train)
    hist = sim.train(val)
    print(f"lambda={cfg.lam:<5} M={cfg.m:<3} rounds={len(hist.round_loss)} "
          f"val RMSE by epoch {[round(v, 4) for v in hist.epoch_val_rmse]} test {sim.evaluate(test):.4f}")

# with graph expansion after two epochs
sim = Simulation(replace(base, expansion=True, t_threshold=2), train)
hist = sim.train(val)
print(f"expansion at round {hist.expansion_round}, test {sim.evaluate(test):.4f}")
