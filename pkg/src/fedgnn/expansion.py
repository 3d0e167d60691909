"""Privacy-preserving graph expansion through an untrusted matcher.

The recommendation server hands every client one shared matching key.
Clients turn their item ids into opaque tokens with a keyed PRF
(HMAC-SHA256) and upload the tokens together with their current user
embedding. The matcher joins users whose token sets intersect and returns
to each user the bare embeddings of (at most ``n_max``) such neighbors.

Messages have an explicit binary encoding so the matcher can sit behind a
real transport; see :func:`encode_upload` and :func:`encode_response`.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np
from scipy import sparse

from .data import LocalGraph

KEY_BYTES = 32
TOKEN_BYTES = 16

_UPLOAD_MAGIC = b"FGU1"
_RESPONSE_MAGIC = b"FGR1"


def keygen(seed: int) -> bytes:
    """Deterministic 256-bit matching key derived from ``seed``."""
    return hashlib.sha256(b"fedgnn-match-key" + struct.pack("<q", seed)).digest()


class EqualityCipher(Protocol):
    """Deterministic, equality-preserving encryption of item ids."""

    def encrypt(self, item_ids: Iterable[int]) -> set[bytes]: ...


class HmacCipher:
    """Keyed PRF tokens: ``HMAC-SHA256(key, id)`` truncated to 16 bytes."""

    def __init__(self, key: bytes):
        if len(key) < 16:
            raise ValueError("matching key must be at least 16 bytes")
        self._key = key

    def token(self, item_id: int) -> bytes:
        msg = struct.pack("<q", int(item_id))
        return hmac.new(self._key, msg, hashlib.sha256).digest()[:TOKEN_BYTES]

    def encrypt(self, item_ids):
        return {self.token(i) for i in item_ids}


def encrypt_item_ids(item_ids, key: bytes) -> set[bytes]:
    return HmacCipher(key).encrypt(item_ids)


@dataclass
class ExpansionUpload:
    pseudonym: bytes
    tokens: list[bytes]
    embedding: np.ndarray


@dataclass
class NeighborResponse:
    pseudonym: bytes
    embeddings: np.ndarray  # (N, d)


# -- wire format ---------------------------------------------------------------
# upload:   magic | u16 len + pseudonym | u32 count | count * (u16 len + token) | u32 d | d * f64
# response: magic | u16 len + pseudonym | u32 n | u32 d | n*d * f64   (little endian)

def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<H", len(b)) + b


def _unpack_bytes(buf: bytes, pos: int):
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise ValueError("truncated message")
    return bytes(buf[pos:pos + n]), pos + n


def _check_magic(buf: bytes, magic: bytes) -> int:
    if bytes(buf[:4]) != magic:
        raise ValueError("bad message magic")
    return 4


def encode_upload(msg: ExpansionUpload) -> bytes:
    emb = np.ascontiguousarray(msg.embedding, dtype="<f8")
    parts = [_UPLOAD_MAGIC, _pack_bytes(msg.pseudonym), struct.pack("<I", len(msg.tokens))]
    parts += [_pack_bytes(t) for t in msg.tokens]
    parts += [struct.pack("<I", emb.size), emb.tobytes()]
    return b"".join(parts)


def decode_upload(buf: bytes) -> ExpansionUpload:
    pos = _check_magic(buf, _UPLOAD_MAGIC)
    pseudonym, pos = _unpack_bytes(buf, pos)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tokens = []
    for _ in range(count):
        tok, pos = _unpack_bytes(buf, pos)
        tokens.append(tok)
    (d,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + 8 * d != len(buf):
        raise ValueError("embedding length does not match message size")
    emb = np.frombuffer(buf, dtype="<f8", count=d, offset=pos).astype(np.float64)
    return ExpansionUpload(pseudonym, tokens, emb)


def encode_response(msg: NeighborResponse) -> bytes:
    emb = np.ascontiguousarray(msg.embeddings, dtype="<f8")
    n, d = emb.shape
    return b"".join([
        _RESPONSE_MAGIC, _pack_bytes(msg.pseudonym), struct.pack("<II", n, d), emb.tobytes(),
    ])


def decode_response(buf: bytes) -> NeighborResponse:
    pos = _check_magic(buf, _RESPONSE_MAGIC)
    pseudonym, pos = _unpack_bytes(buf, pos)
    n, d = struct.unpack_from("<II", buf, pos)
    pos += 8
    if pos + 8 * n * d != len(buf):
        raise ValueError("embedding block does not match message size")
    emb = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).astype(np.float64)
    return NeighborResponse(pseudonym, emb.reshape(n, d))


# -- matcher -------------------------------------------------------------------

def co_interaction(token_sets) -> sparse.csr_matrix:
    """Boolean user x user matrix of non-empty token-set intersections (diagonal cleared)."""
    vocab: dict[bytes, int] = {}
    rows, cols = [], []
    for u, toks in enumerate(token_sets):
        for t in toks:
            rows.append(u)
            cols.append(vocab.setdefault(t, len(vocab)))
    inc = sparse.csr_matrix(
        (np.ones(len(rows), dtype=np.int32), (rows, cols)), shape=(len(token_sets), len(vocab))
    )
    co = (inc @ inc.T).tocsr()
    co.setdiag(0)
    co.eliminate_zeros()
    co.sort_indices()
    return co


class Matcher:
    """Third-party matching service.

    Sees pseudonyms, tokens and embeddings only; never plaintext item ids or
    ratings. Neighbors beyond ``n_max`` are subsampled uniformly.
    """

    def __init__(self, n_max: int = 32, seed: int = 0):
        if n_max < 0:
            raise ValueError("n_max must be >= 0")
        self.n_max = n_max
        self.rng = np.random.default_rng(seed)
        self._uploads: dict[bytes, ExpansionUpload] = {}

    def submit(self, payload: bytes) -> None:
        msg = decode_upload(payload)
        if msg.pseudonym in self._uploads:
            raise ValueError("duplicate pseudonym")
        self._uploads[msg.pseudonym] = msg

    def candidates(self) -> dict[bytes, list[bytes]]:
        """Uncapped neighbor pseudonyms per pseudonym."""
        names = sorted(self._uploads)
        co = co_interaction([set(self._uploads[p].tokens) for p in names])
        return {
            names[i]: [names[j] for j in co.indices[co.indptr[i]:co.indptr[i + 1]]]
            for i in range(len(names))
        }

    def respond(self) -> dict[bytes, bytes]:
        """Encoded neighbor-embedding responses keyed by pseudonym."""
        out = {}
        for name, cands in self.candidates().items():
            if len(cands) > self.n_max:
                pick = self.rng.choice(len(cands), size=self.n_max, replace=False)
                cands = [cands[j] for j in np.sort(pick)]
            d = len(self._uploads[name].embedding)
            emb = np.array([self._uploads[c].embedding for c in cands]).reshape(len(cands), d)
            out[name] = encode_response(NeighborResponse(name, emb))
        self._uploads.clear()
        return out


def match_neighbors(uploads, n_max: int, rng=None, seed: int = 0) -> dict[bytes, np.ndarray]:
    """Batch helper: run a :class:`Matcher` over ``uploads`` and decode the answers."""
    matcher = Matcher(n_max, seed)
    if rng is not None:
        matcher.rng = rng
    for up in uploads:
        matcher.submit(encode_upload(up))
    return {k: decode_response(v).embeddings for k, v in matcher.respond().items()}


def expand_graph(graph: LocalGraph, neighbor_embeddings, dim: int | None = None) -> None:
    """Attach fixed neighbor embeddings to the center user, replacing any previous set."""
    emb = np.asarray(neighbor_embeddings, dtype=np.float64)
    if emb.size == 0:
        emb = np.zeros((0, dim if dim is not None else (emb.shape[-1] if emb.ndim == 2 else 0)))
    elif emb.ndim != 2 or (dim is not None and emb.shape[1] != dim):
        raise ValueError(f"neighbor embeddings must have shape (N, {dim}), got {emb.shape}")
    graph.neighbor_embeddings = emb.copy()
