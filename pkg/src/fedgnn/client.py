"""Simulated user device: local graph, parameter replica, protected uploads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LocalGraph
from .expansion import ExpansionUpload, HmacCipher, decode_response, encode_upload, expand_graph
from .model import ModelParams, apply_update, local_gradients
from .privacy import LdpConfig, protect, pseudo_gradients, sample_pseudo_items


class ProtocolError(RuntimeError):
    """Out-of-order or mismatched protocol message."""


@dataclass
class GradientPacket:
    """One client's protected upload.

    ``item_ids`` mixes real batch items and pseudo items, sorted by id with
    no marker telling them apart. ``local_loss`` is diagnostic only.
    """

    user_id: int
    round_id: int
    model_grads: dict[str, np.ndarray]
    user_grad: np.ndarray
    item_ids: np.ndarray
    item_grads: np.ndarray
    local_loss: float


# rng stream tags, mixed into each client's per-round seed
_TRAIN, _EXPAND = 0, 1


class Client:
    """A user device in lock-step with the server.

    ``params`` is either a private replica (``owns_params=True``) or a
    reference to a table shared by every simulated client, in which case the
    server applies the common part of each update once and the client only
    touches its own user row.
    """

    def __init__(self, graph: LocalGraph, params: ModelParams, seed: int = 0, owns_params: bool = False):
        self.graph = graph
        self.params = params
        self.seed = seed
        self.owns_params = owns_params
        self.round_counter = 0
        self._pseudonym: bytes | None = None

    @property
    def user_id(self) -> int:
        return self.graph.user_id

    def rng(self, round_id: int, stream: int = _TRAIN):
        return np.random.default_rng([self.seed, self.user_id, round_id, stream])

    def local_round(self, ldp: LdpConfig, m: int, include_neighbors: bool,
                    minibatch_size=None, dropout: float = 0.0) -> GradientPacket:
        """Compute, disguise and protect this round's gradients."""
        rng = self.rng(self.round_counter)
        grads, loss = local_gradients(
            self.params, self.graph, dropout=dropout, rng=rng,
            minibatch_size=minibatch_size, include_neighbors=include_neighbors,
        )
        pseudo = sample_pseudo_items(self.graph.item_ids, len(self.params.item_emb), m, rng)
        self.graph.set_pseudo_items(pseudo)
        fake = pseudo_gradients(grads.item_grads, pseudo, rng)

        ids = np.concatenate([grads.item_ids, pseudo])
        rows = np.vstack([grads.item_grads, fake])
        order = np.argsort(ids, kind="stable")
        ids, rows = ids[order], rows[order]

        names = sorted(grads.model_grads)
        pieces = [grads.model_grads[k] for k in names] + [grads.user_grad, rows]
        flat = protect(np.concatenate([p.ravel() for p in pieces]), ldp, rng)
        out, pos = [], 0
        for p in pieces:
            out.append(flat[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        return GradientPacket(
            user_id=self.user_id,
            round_id=self.round_counter,
            model_grads=dict(zip(names, out[:len(names)])),
            user_grad=out[len(names)],
            item_ids=ids,
            item_grads=out[-1],
            local_loss=loss,
        )

    def receive_update(self, agg, lr: float) -> None:
        """Apply the round's aggregated gradients and this user's own echoed gradient."""
        if agg.round_id != self.round_counter:
            raise ProtocolError(
                f"client {self.user_id} expected round {self.round_counter}, got {agg.round_id}"
            )
        if self.owns_params:
            apply_update(self.params, lr, agg.model_grads, agg.item_ids, agg.item_grads)
        own = agg.user_grads.get(self.user_id)
        if own is not None:
            apply_update(self.params, lr, user_grads={self.user_id: own})
        self.round_counter += 1

    def snapshot_user_embedding(self) -> np.ndarray:
        return self.params.user_emb[self.user_id].copy()

    def expansion_upload(self, key: bytes) -> bytes:
        """Encrypted item ids plus the current user embedding, encoded for the matcher."""
        rng = self.rng(self.round_counter, _EXPAND)
        self._pseudonym = rng.bytes(16)
        tokens = sorted(HmacCipher(key).encrypt(self.graph.item_ids.tolist()))
        msg = ExpansionUpload(self._pseudonym, tokens, self.snapshot_user_embedding())
        return encode_upload(msg)

    @property
    def pseudonym(self) -> bytes | None:
        return self._pseudonym

    def receive_neighbors(self, payload: bytes) -> None:
        msg = decode_response(payload)
        if msg.pseudonym != self._pseudonym:
            raise ProtocolError("neighbor response addressed to another pseudonym")
        expand_graph(self.graph, msg.embeddings, dim=self.params.dim)
