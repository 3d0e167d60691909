"""What leaves a device: clipped, noised gradients hidden among pseudo items."""

import numpy as np

from fedgnn.client import Client
from fedgnn.data import LocalGraph
from fedgnn.model import init_params
from fedgnn.privacy import LdpConfig, anonymity_degree, privacy_budget

rng = np.random.default_rng(0)
params = init_params(n_users=10, n_items=200, dim=16, seed=0)
client = Client(LocalGraph(3, [5, 17, 42, 99], [0.5, 0.25, -0.25, 0.0]), params, seed=0)

# no protection: the packet carries exactly the four real item rows
raw = client.local_round(LdpConfig(delta=np.inf, lam=0.0), m=0, include_neighbors=False)
print("real items only :", raw.item_ids.tolist())

# published settings: clip to 0.1, Laplace(0.2) noise, pseudo items mixed in
pkt = client.local_round(LdpConfig(delta=0.1, lam=0.2), m=12, include_neighbors=False)
print("uploaded ids    :", pkt.item_ids.tolist())
print("only the device knows which are real:", sorted(set(pkt.item_ids.tolist()) - set(client.graph.pseudo_items.tolist())))
print("max |value|     :", round(float(np.abs(pkt.item_grads).max()), 3), "(noise lets it exceed delta)")

# accounting
print("budget per round:", privacy_budget(0.1, 0.2))
print("anonymity degree (M=1000 on MovieLens-100K shape):", anonymity_degree(1000, 943, 100_000))
for lam in (0.1, 0.2, 0.5):
    print(f"  lambda={lam}: epsilon = {privacy_budget(0.1, lam):.2f}")
