import math

import numpy as np
import pytest

from fedgnn.client import Client, ProtocolError
from fedgnn.data import LocalGraph
from fedgnn.model import init_params, local_gradients
from fedgnn.privacy import LdpConfig
from fedgnn.server import AggregatedGradients, aggregate

OFF = LdpConfig(math.inf, 0.0)


def _graph():
    return LocalGraph(1, [0, 3, 5], [0.2, -0.1, 0.4])


def _zero_agg(params, round_id=0, user_grads=None):
    return AggregatedGradients(
        round_id=round_id,
        model_grads={k: np.zeros_like(v) for k, v in params.weights.items()},
        item_ids=np.zeros(0, dtype=np.int64),
        item_grads=np.zeros((0, params.dim)),
        user_grads=user_grads or {},
    )


def test_identity_pipeline_equals_raw_gradients():
    p = init_params(3, 8, 4, seed=0)
    c = Client(_graph(), p, seed=0)
    pkt = c.local_round(OFF, m=0, include_neighbors=False)
    raw, loss = local_gradients(p, _graph())
    assert pkt.local_loss == loss
    for k in raw.model_grads:
        assert np.array_equal(pkt.model_grads[k], raw.model_grads[k])
    assert np.array_equal(pkt.user_grad, raw.user_grad)
    assert np.array_equal(pkt.item_ids, raw.item_ids)
    assert np.array_equal(pkt.item_grads, raw.item_grads)


def test_packet_counts_sorting_and_bounds():
    p = init_params(3, 40, 4, seed=0)
    c = Client(_graph(), p, seed=0)
    pkt = c.local_round(LdpConfig(0.1, 0.0), m=10, include_neighbors=False)
    assert len(pkt.item_ids) == 3 + 10 == len(pkt.item_grads)
    assert np.all(np.diff(pkt.item_ids) > 0)
    assert set(c.graph.pseudo_items.tolist()) == set(pkt.item_ids.tolist()) - {0, 3, 5}
    flat = np.concatenate([g.ravel() for g in pkt.model_grads.values()] + [pkt.user_grad, pkt.item_grads.ravel()])
    assert np.abs(flat).max() <= 0.1
    assert not hasattr(pkt, "is_pseudo")


def test_minibatch_count_contract():
    p = init_params(3, 40, 4, seed=0)
    pkt = Client(_graph(), p, seed=0).local_round(OFF, m=5, include_neighbors=False, minibatch_size=2)
    assert len(pkt.item_ids) == 2 + 5


def test_same_seed_same_packet():
    p = init_params(3, 40, 4, seed=0)
    a = Client(_graph(), p, seed=9).local_round(LdpConfig(), 6, False, dropout=0.2)
    b = Client(_graph(), p, seed=9).local_round(LdpConfig(), 6, False, dropout=0.2)
    assert np.array_equal(a.item_ids, b.item_ids)
    assert np.array_equal(a.item_grads, b.item_grads)
    assert np.array_equal(a.user_grad, b.user_grad)


def test_pseudo_items_resampled_each_round():
    p = init_params(3, 200, 4, seed=0)
    c = Client(_graph(), p, seed=0)
    first = c.local_round(OFF, 20, False).item_ids
    c.receive_update(_zero_agg(p), 0.1)
    second = c.local_round(OFF, 20, False).item_ids
    assert not np.array_equal(first, second)


def test_receive_zero_update_only_moves_own_user_row():
    p = init_params(3, 8, 4, seed=0)
    c = Client(_graph(), p.copy(), seed=0, owns_params=True)
    before = c.params.copy()
    g = np.full(4, 0.5)
    c.receive_update(_zero_agg(p, user_grads={1: g}), 0.1)
    assert np.allclose(c.params.user_emb[1], before.user_emb[1] - 0.05)
    assert np.array_equal(c.params.user_emb[[0, 2]], before.user_emb[[0, 2]])
    assert np.array_equal(c.params.item_emb, before.item_emb)
    assert c.round_counter == 1


def test_round_mismatch_is_protocol_error():
    p = init_params(3, 8, 4)
    c = Client(_graph(), p, seed=0)
    with pytest.raises(ProtocolError):
        c.receive_update(_zero_agg(p, round_id=3), 0.1)


def test_snapshot_semantics():
    p = init_params(3, 8, 4, seed=0)
    c = Client(_graph(), p.copy(), seed=0, owns_params=True)
    snap = c.snapshot_user_embedding()
    assert np.array_equal(snap, p.user_emb[1])
    snap[:] = 99.0
    assert not np.any(c.params.user_emb[1] == 99.0)
    pkt = c.local_round(OFF, 0, False)
    c.receive_update(aggregate([pkt]), 0.3)
    assert np.allclose(c.snapshot_user_embedding(), p.user_emb[1] - 0.3 * pkt.user_grad)


def test_lock_step_replicas_identical():
    base = init_params(4, 30, 4, seed=1)
    graphs = [LocalGraph(u, np.sort(np.random.default_rng(u).choice(30, 4, replace=False)),
                         np.full(4, 0.1 * u)) for u in range(4)]
    clients = [Client(g, base.copy(), seed=2, owns_params=True) for g in graphs]
    uploaded = set()
    for _ in range(3):
        pkts = [c.local_round(LdpConfig(), 5, False) for c in clients[:2]]
        agg = aggregate(pkts)
        uploaded |= set(agg.item_ids.tolist())
        for c in clients:
            c.receive_update(agg, 0.1)
    for c in clients[1:]:
        assert np.array_equal(c.params.item_emb, clients[0].params.item_emb)
        for k in base.weights:
            assert np.array_equal(c.params.weights[k], clients[0].params.weights[k])
    frozen = sorted(set(range(30)) - uploaded)
    assert frozen
    assert np.array_equal(clients[0].params.item_emb[frozen], base.item_emb[frozen])
