"""Round scheduling, FedAvg aggregation, the expansion trigger and evaluation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .client import Client, GradientPacket
from .config import TrainConfig
from .data import NORM_HIGH, NORM_LOW, LocalGraph, RatingDataset, build_local_graphs
from .expansion import Matcher, keygen
from .model import ModelParams, apply_update, init_params, score_items

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A round produced a non-finite loss or update (step size too large)."""


@dataclass
class AggregatedGradients:
    """Averaged round update; ``user_grads`` are echoed un-averaged to their owners."""

    round_id: int
    model_grads: dict[str, np.ndarray]
    item_ids: np.ndarray
    item_grads: np.ndarray
    user_grads: dict[int, np.ndarray]


@dataclass
class History:
    round_loss: list[float] = field(default_factory=list)
    epoch_val_rmse: list[float] = field(default_factory=list)
    expansion_round: int | None = None


def select_round_users(user_ids, size: int, rng) -> np.ndarray:
    """Uniform sample of ``size`` distinct users (``user_ids`` may be a count)."""
    pool = np.arange(user_ids) if np.isscalar(user_ids) else np.asarray(user_ids)
    if size > len(pool):
        raise ValueError(f"round size {size} exceeds number of users {len(pool)}")
    return pool[rng.choice(len(pool), size=size, replace=False)]


def aggregate(packets: list[GradientPacket]) -> AggregatedGradients:
    """FedAvg over one round.

    Model gradients are averaged over the ``|S|`` packets. Each item row is
    the sum of its contributions divided by ``|S|`` as well, whatever the
    number of contributors. Sums run in user-id order so the result does not
    depend on arrival order.
    """
    if not packets:
        raise ValueError("no packets to aggregate")
    packets = sorted(packets, key=lambda p: p.user_id)
    n = len(packets)
    round_ids = {p.round_id for p in packets}
    if len(round_ids) != 1:
        raise ValueError(f"packets from different rounds: {sorted(round_ids)}")
    names = sorted(packets[0].model_grads)
    model = {}
    for k in names:
        shape = packets[0].model_grads[k].shape
        acc = np.zeros(shape)
        for p in packets:
            g = p.model_grads.get(k)
            if g is None or g.shape != shape:
                raise ValueError(f"model gradient {k!r} shape mismatch in packet of user {p.user_id}")
            acc += g
        model[k] = acc / n

    all_ids = np.concatenate([p.item_ids for p in packets])
    all_rows = np.vstack([p.item_grads for p in packets])
    ids, inverse = np.unique(all_ids, return_inverse=True)
    sums = np.zeros((len(ids), all_rows.shape[1]))
    np.add.at(sums, inverse, all_rows)
    return AggregatedGradients(
        round_id=round_ids.pop(),
        model_grads=model,
        item_ids=ids,
        item_grads=sums / n,
        user_grads={p.user_id: p.user_grad for p in packets},
    )


def evaluate_rmse(params: ModelParams, graphs: dict[int, LocalGraph], ds: RatingDataset) -> float:
    """RMSE on the original rating scale of clamped predictions for ``ds``."""
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    preds = np.empty(len(ds))
    order = np.argsort(ds.users, kind="stable")
    users = ds.users[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for idx in np.split(order, bounds):
        u = int(ds.users[idx[0]])
        preds[idx] = score_items(params, graphs.get(u), u, ds.items[idx])
    rating = ds.denormalize(np.clip(preds, NORM_LOW, NORM_HIGH))
    return float(np.sqrt(np.mean((rating - ds.ratings) ** 2)))


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDGNN_THREADS", "1")))
    except ValueError:
        return 1


class Simulation:
    """Server plus all simulated clients for one training run.

    With ``replicate=True`` every client owns a private parameter copy and
    receives every update (the literal protocol). The default shares one
    table among clients; the observable results are identical.
    """

    def __init__(self, config: TrainConfig, train_ds: RatingDataset, replicate: bool = False,
                 threads: int | None = None):
        self.config = config
        self.train_ds = train_ds
        self.graphs = build_local_graphs(train_ds)
        self.user_ids = np.array(sorted(self.graphs))
        if config.round_size > len(self.user_ids):
            raise ValueError(
                f"round size {config.round_size} exceeds number of clients {len(self.user_ids)}"
            )
        self.params = init_params(train_ds.n_users, train_ds.n_items, config.dim, config.variant, config.seed)
        self.replicate = replicate
        self.clients = {
            u: Client(g, self.params.copy() if replicate else self.params, config.seed, owns_params=replicate)
            for u, g in self.graphs.items()
        }
        self.threads = threads or _thread_count()
        self.sched_rng = np.random.default_rng([config.seed, 7])
        self.round = 0
        self.expanded = False
        self.expansion_round: int | None = None

    @property
    def n_clients(self) -> int:
        return len(self.user_ids)

    @property
    def total_rounds(self) -> int:
        return self.config.epochs * self.n_clients // self.config.round_size

    def gate_open(self, round_id: int) -> bool:
        cfg = self.config
        return cfg.expansion and round_id * cfg.round_size >= cfg.t_threshold * self.n_clients

    def run_round(self) -> AggregatedGradients:
        cfg = self.config
        c = self.round
        selected = np.sort(select_round_users(self.user_ids, cfg.round_size, self.sched_rng))
        with_neighbors = self.gate_open(c)

        def work(u):
            return self.clients[int(u)].local_round(
                cfg.ldp, cfg.m, with_neighbors, cfg.minibatch_size, cfg.dropout
            )

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                packets = list(pool.map(work, selected))
        else:
            packets = [work(u) for u in selected]

        losses = [p.local_loss for p in packets]
        if not np.all(np.isfinite(losses)):
            raise TrainingDiverged(f"non-finite local loss in round {c}; lower the learning rate")
        if with_neighbors and not self.expanded:
            self.run_expansion()
        agg = aggregate(packets)
        if not (np.isfinite(agg.item_grads).all() and all(np.isfinite(g).all() for g in agg.model_grads.values())):
            raise TrainingDiverged(f"non-finite aggregated gradient in round {c}; lower the learning rate")
        self.dispatch(agg)
        self.round += 1
        self.last_loss = float(np.mean(losses))
        return agg

    def dispatch(self, agg: AggregatedGradients) -> None:
        lr = self.config.lr
        if self.replicate:
            apply_update(self.params, lr, agg.model_grads, agg.item_ids, agg.item_grads, agg.user_grads)
        else:
            apply_update(self.params, lr, agg.model_grads, agg.item_ids, agg.item_grads)
        for u in self.user_ids:
            self.clients[int(u)].receive_update(agg, lr)

    def run_expansion(self) -> None:
        """Key distribution, encrypted upload, third-party matching, graph extension."""
        key = keygen(self.config.seed)
        matcher = Matcher(self.config.neighbor_cap, seed=self.config.seed)
        routes = {}
        for u in self.user_ids:
            client = self.clients[int(u)]
            matcher.submit(client.expansion_upload(key))
            routes[client.pseudonym] = client
        for pseudonym, payload in matcher.respond().items():
            routes[pseudonym].receive_neighbors(payload)
        self.expanded = True
        self.expansion_round = self.round
        log.info("graph expansion ran at round %d", self.round)

    def evaluate(self, ds: RatingDataset) -> float:
        return evaluate_rmse(self.params, self.graphs, ds)

    def train(self, val_ds: RatingDataset | None = None, callback=None) -> History:
        hist = History()
        n, size = self.n_clients, self.config.round_size
        for _ in range(self.total_rounds):
            self.run_round()
            hist.round_loss.append(self.last_loss)
            done = self.round * size
            if val_ds is not None and done // n > (done - size) // n:
                hist.epoch_val_rmse.append(self.evaluate(val_ds))
            if callback is not None:
                callback(self)
        # floor(epochs * P / |S|) rounds can stop just short of the last boundary
        if val_ds is not None and len(hist.epoch_val_rmse) < self.config.epochs and self.round:
            hist.epoch_val_rmse.append(self.evaluate(val_ds))
        hist.expansion_round = self.expansion_round
        return hist


def train(config: TrainConfig, train_ds: RatingDataset, val_ds: RatingDataset | None = None, **kw):
    """Run the full protocol; returns ``(params, history, simulation)``."""
    sim = Simulation(config, train_ds, **kw)
    hist = sim.train(val_ds)
    return sim.params, hist, sim
