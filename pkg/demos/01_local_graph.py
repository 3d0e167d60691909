"""A single user's star graph: forward pass, predictions, gradients."""

import numpy as np

from fedgnn.data import LocalGraph
from fedgnn.model import gnn_forward, init_params, local_gradients, predict_ratings

# one user (id 2) who rated three of ten items; ratings already normalized
params = init_params(n_users=5, n_items=10, dim=8, variant="gat", seed=0)
graph = LocalGraph(user_id=2, item_ids=[1, 4, 7], ratings=[0.25, -0.5, 0.0])

reps = gnn_forward(params, graph)
print("user repr     ", reps.h_user.round(3))
print("item reprs    ", reps.h_items.shape)
print("predictions   ", predict_ratings(reps).round(4))

# after expansion the user also sees two anonymous neighbors (fixed rows)
graph.neighbor_embeddings = np.random.default_rng(1).normal(0, 0.1, (2, 8))
reps = gnn_forward(params, graph)
print("with neighbors", predict_ratings(reps).round(4))

# gradients for every parameter the user touches; neighbors get none
grads, loss = local_gradients(params, graph)
print("loss", round(loss, 5))
for name, g in grads.model_grads.items():
    print(f"  d/d{name:<2} {g.shape}  |g|max {np.abs(g).max():.2e}")
print("  user row  ", grads.user_grad.shape)
print("  item rows ", grads.item_ids.tolist(), grads.item_grads.shape)

# the other two variants plug in the same way
for variant in ("gcn", "ggnn"):
    p = init_params(5, 10, 8, variant, seed=0)
    print(variant, predict_ratings(gnn_forward(p, graph)).round(4))
