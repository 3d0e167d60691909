"""Rating datasets, train/val/test splits and per-user local graphs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMATS = ("ml100k", "generic-tsv")

# normalized ratings live in [NORM_LOW, NORM_HIGH]; the scale midpoint maps to 0
NORM_LOW, NORM_HIGH = -0.5, 0.5


class DatasetError(ValueError):
    """Raised for unreadable, malformed or inconsistent rating data."""


@dataclass(frozen=True)
class RatingDataset:
    """Observed (user, item, rating) triples plus the rating scale.

    Ids are 0-based and contiguous. Ratings are kept on their original scale;
    use :meth:`normalize` to map them into [-0.5, 0.5] for training.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    rating_min: float = 1.0
    rating_max: float = 5.0

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.float64)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        if self.n_users < 1 or self.n_items < 1:
            raise DatasetError("user and item counts must be positive")
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise DatasetError("users, items and ratings must be equal-length vectors")
        if self.rating_max <= self.rating_min:
            raise DatasetError("rating_max must exceed rating_min")
        if len(users):
            if users.min() < 0 or users.max() >= self.n_users:
                raise DatasetError("user id out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DatasetError("item id out of range")
            if ratings.min() < self.rating_min or ratings.max() > self.rating_max:
                raise DatasetError(
                    f"rating outside scale [{self.rating_min}, {self.rating_max}]"
                )
            keys = users * self.n_items + items
            if len(np.unique(keys)) != len(keys):
                raise DatasetError("duplicate (user, item) pair")

    def __len__(self) -> int:
        return len(self.ratings)

    def triples(self):
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield u, i, r

    @property
    def scale(self) -> float:
        return self.rating_max - self.rating_min

    def normalize(self, ratings=None) -> np.ndarray:
        r = self.ratings if ratings is None else np.asarray(ratings, dtype=np.float64)
        return (r - self.rating_min) / self.scale + NORM_LOW

    def denormalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - NORM_LOW) * self.scale + self.rating_min

    def subset(self, index) -> "RatingDataset":
        """Dataset restricted to the triples at ``index``; shape and scale are kept."""
        return replace(
            self,
            users=self.users[index],
            items=self.items[index],
            ratings=self.ratings[index],
        )


@dataclass
class LocalGraph:
    """One user's star graph.

    The center user links to its rated items and, after expansion, to
    anonymous neighbor users. Neighbor users are carried only as fixed
    embedding rows (``neighbor_embeddings``); they never link to items.
    """

    user_id: int
    item_ids: np.ndarray
    ratings: np.ndarray  # normalized, see RatingDataset.normalize
    pseudo_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    neighbor_embeddings: np.ndarray | None = None

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if len(self.item_ids) < 1:
            raise ValueError(f"user {self.user_id} has no interacted items")
        if len(self.item_ids) != len(self.ratings):
            raise ValueError("item_ids and ratings differ in length")

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_neighbors(self) -> int:
        return 0 if self.neighbor_embeddings is None else len(self.neighbor_embeddings)

    def set_pseudo_items(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if np.intersect1d(ids, self.item_ids).size:
            raise ValueError("pseudo items overlap interacted items")
        self.pseudo_items = ids


def _parse_lines(path: Path, n_fields: int, offset: int):
    users, items, ratings = [], [], []
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < n_fields:
            raise DatasetError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
        try:
            u, i, r = int(parts[0]) - offset, int(parts[1]) - offset, float(parts[2])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed line {line!r}") from exc
        if u < 0 or i < 0:
            raise DatasetError(f"{path}:{lineno}: negative id")
        users.append(u)
        items.append(i)
        ratings.append(r)
    if not users:
        raise DatasetError(f"{path}: no ratings")
    return np.array(users), np.array(items), np.array(ratings, dtype=np.float64)


def load_ratings(path, format: str = "ml100k", rating_min=None, rating_max=None) -> RatingDataset:
    """Read a ratings file.

    ``ml100k`` is the MovieLens ``u.data`` layout (tab separated
    user/item/rating/timestamp, 1-based ids, scale 1..5). ``generic-tsv`` is
    user/item/rating with 0-based ids; its scale comes from ``rating_min`` and
    ``rating_max`` or, when omitted, from the observed ratings.
    """
    path = Path(path)
    if format == "ml100k":
        users, items, ratings = _parse_lines(path, 4, offset=1)
        lo = 1.0 if rating_min is None else rating_min
        hi = 5.0 if rating_max is None else rating_max
    elif format == "generic-tsv":
        users, items, ratings = _parse_lines(path, 3, offset=0)
        lo = float(ratings.min()) if rating_min is None else rating_min
        hi = float(ratings.max()) if rating_max is None else rating_max
        if hi == lo:
            hi = lo + 1.0
    else:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    return RatingDataset(
        n_users=int(users.max()) + 1,
        n_items=int(items.max()) + 1,
        users=users,
        items=items,
        ratings=ratings,
        rating_min=float(lo),
        rating_max=float(hi),
    )


def split_dataset(ds: RatingDataset, train_frac=0.8, val_frac=0.1, seed=0, max_retries=10):
    """Random per-rating split into (train, val, test).

    Every user that has ratings keeps at least one of them in train: a user
    left without training ratings has its own ratings re-drawn up to
    ``max_retries`` times, after which all of them are moved to train.
    """
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ValueError("need 0 < train_frac, val_frac and train_frac + val_frac < 1")
    rng = np.random.default_rng(seed)
    n = len(ds)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    assign = np.full(n, 2, dtype=np.int8)  # 0 train, 1 val, 2 test
    perm = rng.permutation(n)
    assign[perm[:n_train]] = 0
    assign[perm[n_train:n_train + n_val]] = 1

    has_train = np.zeros(ds.n_users, dtype=bool)
    has_train[ds.users[assign == 0]] = True
    present = np.zeros(ds.n_users, dtype=bool)
    present[ds.users] = True
    probs = np.array([train_frac, val_frac, 1 - train_frac - val_frac])
    for u in np.flatnonzero(present & ~has_train):
        idx = np.flatnonzero(ds.users == u)
        for _ in range(max_retries):
            draw = rng.choice(3, size=len(idx), p=probs).astype(np.int8)
            if (draw == 0).any():
                assign[idx] = draw
                break
        else:
            assign[idx] = 0

    return tuple(ds.subset(np.flatnonzero(assign == k)) for k in range(3))


def build_local_graphs(train: RatingDataset) -> dict[int, LocalGraph]:
    """One star graph per user with at least one training rating."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    order = np.lexsort((train.items, train.users))
    users = train.users[order]
    items = train.items[order]
    norm = train.normalize()[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    graphs = {}
    for idx in np.split(np.arange(len(users)), bounds):
        u = int(users[idx[0]])
        graphs[u] = LocalGraph(user_id=u, item_ids=items[idx], ratings=norm[idx])
    return graphs


def low_rank_matrix(n_users, n_items, rank, noise_std=0.0, seed=0, factors=None) -> np.ndarray:
    """Dense ``U @ V.T + noise`` with standard normal factors unless given."""
    if rank > min(n_users, n_items):
        raise ValueError("rank exceeds min(n_users, n_items)")
    rng = np.random.default_rng(seed)
    if factors is None:
        u = rng.standard_normal((n_users, rank))
        v = rng.standard_normal((n_items, rank))
    else:
        u, v = (np.asarray(f, dtype=np.float64) for f in factors)
    mat = u @ v.T
    if noise_std > 0:
        mat = mat + rng.normal(0.0, noise_std, size=mat.shape)
    return mat


def synth_low_rank(n_users, n_items, rank, density, noise_std=0.0, seed=0, factors=None) -> RatingDataset:
    """Sample a low-rank rating dataset on the [1, 5] scale.

    The full matrix is affinely rescaled so its min maps to 1 and its max to
    5, then each entry is observed with probability ``density``. Users left
    with no observed entries are dropped and the remaining users renumbered.
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    mat = low_rank_matrix(n_users, n_items, rank, noise_std, seed, factors)
    lo, hi = mat.min(), mat.max()
    if hi > lo:
        scaled = 1.0 + 4.0 * (mat - lo) / (hi - lo)
    else:
        scaled = np.full_like(mat, 3.0)
    mask_rng = np.random.default_rng([seed, 1])
    mask = mask_rng.random(mat.shape) < density
    keep_users = np.flatnonzero(mask.any(axis=1))
    mask = mask[keep_users]
    scaled = scaled[keep_users]
    users, items = np.nonzero(mask)
    return RatingDataset(
        n_users=len(keep_users),
        n_items=n_items,
        users=users,
        items=items,
        ratings=np.clip(scaled[users, items], 1.0, 5.0),
        rating_min=1.0,
        rating_max=5.0,
    )
