"""Neighbor discovery without revealing item ids to the matcher."""

import numpy as np

from fedgnn.client import Client
from fedgnn.data import LocalGraph
from fedgnn.expansion import Matcher, decode_upload, keygen
from fedgnn.model import init_params

params = init_params(n_users=4, n_items=10, dim=4, seed=0)
item_sets = {0: [1, 2], 1: [2, 3], 2: [7], 3: [1, 9]}
clients = {u: Client(LocalGraph(u, items, np.zeros(len(items))), params, seed=0)
           for u, items in item_sets.items()}

# the recommendation server hands every client the same matching key
key = keygen(seed=0)

# clients upload opaque tokens plus their current embedding under a pseudonym
matcher = Matcher(n_max=32, seed=0)
routes = {}
for u, c in clients.items():
    payload = c.expansion_upload(key)
    msg = decode_upload(payload)
    print(f"user {u}: {len(payload)} bytes, {len(msg.tokens)} tokens, pseudonym {msg.pseudonym.hex()[:8]}")
    matcher.submit(payload)
    routes[c.pseudonym] = c

# the matcher joins on tokens and answers each pseudonym with bare embeddings
for pseudonym, reply in matcher.respond().items():
    routes[pseudonym].receive_neighbors(reply)

for u, c in clients.items():
    print(f"user {u} now has {c.graph.n_neighbors} neighbor(s)")
# expected: 0-1 share item 2, 0-3 share item 1, user 2 is alone
