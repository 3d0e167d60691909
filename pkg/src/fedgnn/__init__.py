"""Federated GNN recommendation: local star-graph GNNs, LDP uploads, FedAvg, private graph expansion."""

from .config import ConfigError, TrainConfig
from .data import RatingDataset, build_local_graphs, load_ratings, split_dataset, synth_low_rank
from .model import ModelParams, gnn_forward, init_params, local_gradients
from .privacy import LdpConfig, anonymity_degree, privacy_budget
from .server import Simulation, aggregate, evaluate_rmse, train

__all__ = [
    "ConfigError", "TrainConfig", "RatingDataset", "build_local_graphs", "load_ratings",
    "split_dataset", "synth_low_rank", "ModelParams", "gnn_forward", "init_params",
    "local_gradients", "LdpConfig", "anonymity_degree", "privacy_budget", "Simulation",
    "aggregate", "evaluate_rmse", "train",
]

__version__ = "0.1.0"
