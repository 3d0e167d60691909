import os
from pathlib import Path

import numpy as np
import pytest

from fedgnn.data import LocalGraph

ROOT = Path(__file__).resolve().parents[1]


def ml100k_path():
    """Location of MovieLens-100K ``u.data``: $FEDGNN_ML100K or data/ml-100k/u.data."""
    env = os.environ.get("FEDGNN_ML100K")
    return Path(env) if env else ROOT / "data" / "ml-100k" / "u.data"


def random_graph(rng, n_users=6, n_items=12, dim=4, max_k=5, max_n=3, neighbors=True):
    k = int(rng.integers(1, max_k + 1))
    n = int(rng.integers(0, max_n + 1)) if neighbors else 0
    items = np.sort(rng.choice(n_items, size=k, replace=False))
    g = LocalGraph(
        user_id=int(rng.integers(n_users)),
        item_ids=items,
        ratings=rng.uniform(-0.5, 0.5, size=k),
    )
    if n:
        g.neighbor_embeddings = rng.normal(0, 0.5, size=(n, dim))
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
