"""Embedding tables, one-hop GNNs over a local star graph, and their gradients.

The local graph of a user is a star: node 0 is the user, followed by the
rated items in the current batch and then the fixed neighbor users. Every
non-center ("leaf") node aggregates over itself and the center; the center
aggregates over every node. Backpropagation is written out by hand for each
variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LocalGraph

VARIANTS = ("gat", "gcn", "ggnn")
LEAKY_SLOPE = 0.2
EMBED_STD = 0.1

_WEIGHT_NAMES = {
    "gat": ("W", "a"),
    "gcn": ("W",),
    "ggnn": ("W", "Wz", "Uz", "Wr", "Ur", "Wh", "Uh"),
}


@dataclass
class ModelParams:
    """All trainable state shared by clients: both embedding tables and the GNN weights."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    weights: dict[str, np.ndarray]
    variant: str = "gat"

    @property
    def dim(self) -> int:
        return self.item_emb.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.user_emb.copy(),
            self.item_emb.copy(),
            {k: v.copy() for k, v in self.weights.items()},
            self.variant,
        )

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return (
            self.variant == other.variant
            and np.allclose(self.user_emb, other.user_emb, **kw)
            and np.allclose(self.item_emb, other.item_emb, **kw)
            and self.weights.keys() == other.weights.keys()
            and all(np.allclose(v, other.weights[k], **kw) for k, v in self.weights.items())
        )


@dataclass
class NodeRepresentations:
    h_user: np.ndarray
    h_items: np.ndarray
    h_neighbors: np.ndarray


@dataclass
class LocalGradients:
    """Gradients of one user's local loss.

    ``item_ids`` are the (sorted) batch items and ``item_grads`` holds the
    matching rows; ``model_grads`` mirrors ``ModelParams.weights``.
    """

    model_grads: dict[str, np.ndarray]
    user_grad: np.ndarray
    item_ids: np.ndarray
    item_grads: np.ndarray

    def item_grad_map(self) -> dict[int, np.ndarray]:
        return {int(i): g for i, g in zip(self.item_ids, self.item_grads)}


def _glorot(rng, shape):
    fan_in, fan_out = shape[-1], shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(n_users: int, n_items: int, dim: int, variant: str = "gat", seed: int = 0) -> ModelParams:
    """Embeddings ~ N(0, 0.1^2), GNN weights Glorot-uniform; fully determined by ``seed``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    user_emb = rng.normal(0.0, EMBED_STD, size=(n_users, dim))
    item_emb = rng.normal(0.0, EMBED_STD, size=(n_items, dim))
    weights = {}
    for name in _WEIGHT_NAMES[variant]:
        shape = (2 * dim, 1) if name == "a" else (dim, dim)
        w = _glorot(rng, shape)
        weights[name] = w.ravel() if name == "a" else w
    return ModelParams(user_emb, item_emb, weights, variant)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _lrelu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dropout_scale(shape, dropout, train, rng):
    """Inverted-dropout multipliers for aggregation coefficients (ones when off)."""
    if not train or dropout <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= dropout
    return keep / (1.0 - dropout)


@dataclass
class _Cache:
    variant: str
    X: np.ndarray
    Z: np.ndarray
    extra: dict = field(default_factory=dict)


# -- GAT ---------------------------------------------------------------------

def _gat_forward(w, X, dropout, train, rng):
    d = X.shape[1]
    W, a = w["W"], w["a"]
    a1, a2 = a[:d], a[d:]
    Z = X @ W.T
    f, g = Z @ a1, Z @ a2

    # center attends over every node (itself included)
    t_c = f[0] + g
    s_c = _lrelu(t_c)
    att_c = np.exp(s_c - s_c.max())
    att_c /= att_c.sum()
    m_c = _dropout_scale(att_c.shape, dropout, train, rng)
    pre_c = (att_c * m_c) @ Z

    # each leaf attends over {itself, center}
    t_l = np.stack([f[1:] + g[1:], f[1:] + g[0]], axis=1)
    s_l = _lrelu(t_l)
    att_l = np.exp(s_l - s_l.max(axis=1, keepdims=True))
    att_l /= att_l.sum(axis=1, keepdims=True)
    m_l = _dropout_scale(att_l.shape, dropout, train, rng)
    eff_l = att_l * m_l
    pre_l = eff_l[:, :1] * Z[1:] + eff_l[:, 1:] * Z[0]

    H = _elu(np.vstack([pre_c, pre_l]))
    cache = _Cache("gat", X, Z, dict(
        a1=a1, a2=a2, t_c=t_c, att_c=att_c, m_c=m_c, pre_c=pre_c,
        t_l=t_l, att_l=att_l, m_l=m_l, pre_l=pre_l,
    ))
    return H, cache


def _gat_backward(w, cache, dH):
    c = cache.extra
    X, Z = cache.X, cache.Z
    dZ = np.zeros_like(Z)
    df = np.zeros(len(Z))
    dg = np.zeros(len(Z))

    dpre_c = dH[0] * _elu_grad(c["pre_c"])
    eff_c = c["att_c"] * c["m_c"]
    dZ += np.outer(eff_c, dpre_c)
    datt = (Z @ dpre_c) * c["m_c"]
    ds = c["att_c"] * (datt - c["att_c"] @ datt)
    dt = ds * np.where(c["t_c"] > 0, 1.0, LEAKY_SLOPE)
    df[0] += dt.sum()
    dg += dt

    dpre_l = dH[1:] * _elu_grad(c["pre_l"])
    eff_l = c["att_l"] * c["m_l"]
    dZ[1:] += eff_l[:, :1] * dpre_l
    dZ[0] += eff_l[:, 1] @ dpre_l
    datt_l = np.stack([(Z[1:] * dpre_l).sum(axis=1), dpre_l @ Z[0]], axis=1) * c["m_l"]
    att_l = c["att_l"]
    ds_l = att_l * (datt_l - (att_l * datt_l).sum(axis=1, keepdims=True))
    dt_l = ds_l * np.where(c["t_l"] > 0, 1.0, LEAKY_SLOPE)
    df[1:] += dt_l.sum(axis=1)
    dg[1:] += dt_l[:, 0]
    dg[0] += dt_l[:, 1].sum()

    dZ += np.outer(df, c["a1"]) + np.outer(dg, c["a2"])
    grads = {
        "a": np.concatenate([Z.T @ df, Z.T @ dg]),
        "W": dZ.T @ X,
    }
    return grads, dZ @ w["W"]


# -- coefficient-based variants (GCN, GGNN) ----------------------------------

def _gcn_coefficients(n):
    """Symmetric-normalized star adjacency with self-loops (degrees n and 2)."""
    deg = np.full(n, 2.0)
    deg[0] = n
    C = np.zeros((n, n))
    C[0, :] = 1.0 / np.sqrt(deg[0] * deg)
    C[1:, 0] = C[0, 1:]
    idx = np.arange(1, n)
    C[idx, idx] = 0.5
    return C


def _mean_coefficients(n):
    """Mean over neighbors without self-loops: center over leaves, leaf over center."""
    C = np.zeros((n, n))
    C[0, 1:] = 1.0 / (n - 1)
    C[1:, 0] = 1.0
    return C


def _coef_mask(C, dropout, train, rng):
    scale = _dropout_scale(C.shape, dropout, train, rng)
    return C * scale


def _gcn_forward(w, X, dropout, train, rng):
    Z = X @ w["W"].T
    C = _coef_mask(_gcn_coefficients(len(X)), dropout, train, rng)
    pre = C @ Z
    return _elu(pre), _Cache("gcn", X, Z, dict(C=C, pre=pre))


def _gcn_backward(w, cache, dH):
    dpre = dH * _elu_grad(cache.extra["pre"])
    dZ = cache.extra["C"].T @ dpre
    return {"W": dZ.T @ cache.X}, dZ @ w["W"]


def _ggnn_forward(w, X, dropout, train, rng):
    Z = X @ w["W"].T
    n = len(X)
    if n == 1:
        C = np.zeros((1, 1))
    else:
        C = _coef_mask(_mean_coefficients(n), dropout, train, rng)
    M = C @ Z
    zg = _sigmoid(M @ w["Wz"].T + X @ w["Uz"].T)
    r = _sigmoid(M @ w["Wr"].T + X @ w["Ur"].T)
    rX = r * X
    cand = np.tanh(M @ w["Wh"].T + rX @ w["Uh"].T)
    H = (1.0 - zg) * X + zg * cand
    return H, _Cache("ggnn", X, Z, dict(C=C, M=M, zg=zg, r=r, rX=rX, cand=cand))


def _ggnn_backward(w, cache, dH):
    c = cache.extra
    X, M, zg, r, cand = cache.X, c["M"], c["zg"], c["r"], c["cand"]
    dX = dH * (1.0 - zg)
    dzg = dH * (cand - X)
    dcand = dH * zg

    dAh = dcand * (1.0 - cand ** 2)
    dM = dAh @ w["Wh"]
    drX = dAh @ w["Uh"]
    dr = drX * X
    dX += drX * r

    dAz = dzg * zg * (1.0 - zg)
    dAr = dr * r * (1.0 - r)
    dM += dAz @ w["Wz"] + dAr @ w["Wr"]
    dX += dAz @ w["Uz"] + dAr @ w["Ur"]

    dZ = c["C"].T @ dM
    dX += dZ @ w["W"]
    grads = {
        "W": dZ.T @ X,
        "Wz": dAz.T @ M, "Uz": dAz.T @ X,
        "Wr": dAr.T @ M, "Ur": dAr.T @ X,
        "Wh": dAh.T @ M, "Uh": dAh.T @ c["rX"],
    }
    return grads, dX


_FORWARD = {"gat": _gat_forward, "gcn": _gcn_forward, "ggnn": _ggnn_forward}
_BACKWARD = {"gat": _gat_backward, "gcn": _gcn_backward, "ggnn": _ggnn_backward}


def star_forward(weights, variant, x_user, x_items, x_neighbors=None,
                 train=False, dropout=0.0, rng=None):
    """Run one message-passing hop over a star graph given raw node embeddings.

    Returns the stacked representations (center first, then items, then
    neighbors) and a cache for :func:`star_backward`.
    """
    d = len(x_user)
    if x_neighbors is None:
        x_neighbors = np.zeros((0, d))
    X = np.vstack([x_user[None, :], x_items, x_neighbors])
    if train and dropout > 0 and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    return _FORWARD[variant](weights, X, dropout, train, rng)


def star_backward(weights, cache, dH):
    """Backprop ``dH`` (same shape as the forward output) to weights and node inputs."""
    return _BACKWARD[cache.variant](weights, cache, dH)


def _lookup(params: ModelParams, graph: LocalGraph, item_ids):
    if not 0 <= graph.user_id < len(params.user_emb):
        raise IndexError(f"user id {graph.user_id} out of range")
    if len(item_ids) and (item_ids.min() < 0 or item_ids.max() >= len(params.item_emb)):
        raise IndexError("item id out of range")
    nb = graph.neighbor_embeddings
    if nb is not None and len(nb) == 0:
        nb = None
    if nb is not None and nb.shape[1:] != (params.dim,):
        raise ValueError("neighbor embedding dimension mismatch")
    return params.user_emb[graph.user_id], params.item_emb[item_ids], nb


def gnn_forward(params: ModelParams, graph: LocalGraph, train=False, dropout=0.0, rng=None,
                item_ids=None, include_neighbors=True) -> NodeRepresentations:
    """Node representations for ``graph`` (optionally a subset of its items)."""
    ids = graph.item_ids if item_ids is None else np.asarray(item_ids, dtype=np.int64)
    x_u, x_i, x_n = _lookup(params, graph, ids)
    if not include_neighbors:
        x_n = None
    H, _ = star_forward(params.weights, params.variant, x_u, x_i, x_n, train, dropout, rng)
    return NodeRepresentations(H[0], H[1:1 + len(ids)], H[1 + len(ids):])


def predict_ratings(reps: NodeRepresentations) -> np.ndarray:
    """Dot-product predictions (normalized rating space) for every item row."""
    return reps.h_items @ reps.h_user


def local_loss(preds, golds) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    golds = np.asarray(golds, dtype=np.float64)
    if preds.shape != golds.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {golds.shape}")
    if preds.size == 0:
        raise ValueError("empty prediction vector")
    return float(np.mean((preds - golds) ** 2))


def select_minibatch(graph: LocalGraph, minibatch_size, rng) -> np.ndarray:
    """Positions of the rated items used this step (all of them when the batch covers K)."""
    k = graph.n_items
    if minibatch_size is None or minibatch_size >= k:
        return np.arange(k)
    return np.sort(rng.choice(k, size=minibatch_size, replace=False))


def local_gradients(params: ModelParams, graph: LocalGraph, dropout=0.0, rng=None,
                    minibatch_size=None, include_neighbors=True):
    """Exact gradients of the local MSE over a mini-batch of rated items.

    Neighbor users enter as constants and get no gradient.

    Returns:
        (LocalGradients, loss)
    """
    pos = select_minibatch(graph, minibatch_size, rng)
    ids = graph.item_ids[pos]
    golds = graph.ratings[pos]
    x_u, x_i, x_n = _lookup(params, graph, ids)
    if not include_neighbors:
        x_n = None
    train = dropout > 0
    H, cache = star_forward(params.weights, params.variant, x_u, x_i, x_n, train, dropout, rng)
    b = len(ids)
    h_u, h_i = H[0], H[1:1 + b]
    preds = h_i @ h_u
    loss = local_loss(preds, golds)

    dpred = 2.0 * (preds - golds) / b
    dH = np.zeros_like(H)
    dH[0] = dpred @ h_i
    dH[1:1 + b] = np.outer(dpred, h_u)
    wgrads, dX = star_backward(params.weights, cache, dH)

    order = np.argsort(ids)
    grads = LocalGradients(
        model_grads=wgrads,
        user_grad=dX[0],
        item_ids=ids[order],
        item_grads=dX[1:1 + b][order],
    )
    return grads, loss


def score_items(params: ModelParams, graph: LocalGraph | None, user_id: int, item_ids) -> np.ndarray:
    """Predicted normalized ratings of ``item_ids`` for ``user_id`` (unclamped).

    The user representation comes from the user's training graph in eval
    mode. Each candidate item is scored as a leaf attached to that user. A
    user without a training graph falls back to the raw embedding dot product.
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if graph is None:
        return params.item_emb[item_ids] @ params.user_emb[user_id]
    x_u, x_i, x_n = _lookup(params, graph, graph.item_ids)
    H, _ = star_forward(params.weights, params.variant, x_u, x_i, x_n)
    h_u = H[0]
    return _leaf_reps(params, x_u, params.item_emb[item_ids], len(H)) @ h_u


def _leaf_reps(params, x_u, x_targets, center_degree):
    """Representations of candidate leaves attached to a center of the given degree."""
    w, variant = params.weights, params.variant
    if variant == "gat":
        d = len(x_u)
        z_u = w["W"] @ x_u
        Z = x_targets @ w["W"].T
        f, g = Z @ w["a"][:d], Z @ w["a"][d:]
        t = np.stack([f + g, f + z_u @ w["a"][d:]], axis=1)
        s = _lrelu(t)
        att = np.exp(s - s.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        return _elu(att[:, :1] * Z + att[:, 1:] * z_u)
    if variant == "gcn":
        z_u = w["W"] @ x_u
        Z = x_targets @ w["W"].T
        return _elu(0.5 * Z + z_u / np.sqrt(2.0 * center_degree))
    M = np.broadcast_to(w["W"] @ x_u, x_targets.shape)
    X = x_targets
    zg = _sigmoid(M @ w["Wz"].T + X @ w["Uz"].T)
    r = _sigmoid(M @ w["Wr"].T + X @ w["Ur"].T)
    cand = np.tanh(M @ w["Wh"].T + (r * X) @ w["Uh"].T)
    return (1.0 - zg) * X + zg * cand


def apply_update(params: ModelParams, lr: float, model_grads=None, item_ids=None, item_grads=None,
                 user_grads=None) -> None:
    """In-place SGD step ``p <- p - lr * g``: dense weights, sparse item and user rows."""
    if model_grads:
        for name, g in model_grads.items():
            if params.weights[name].shape != np.shape(g):
                raise ValueError(f"gradient shape mismatch for {name}")
        for name, g in model_grads.items():
            params.weights[name] -= lr * g
    if item_ids is not None and len(item_ids):
        item_grads = np.asarray(item_grads)
        if item_grads.shape != (len(item_ids), params.dim):
            raise ValueError("item gradient shape mismatch")
        params.item_emb[np.asarray(item_ids)] -= lr * item_grads
    if user_grads:
        for uid, g in user_grads.items():
            if np.shape(g) != (params.dim,):
                raise ValueError("user gradient shape mismatch")
            params.user_emb[uid] -= lr * g
