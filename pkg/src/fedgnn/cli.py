"""Command-line runner: train, eval, sweep and ablate.

Every run writes a ``key<TAB>value`` report (one metric per line) and
prints a short summary. Failures exit nonzero and print
``error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .data import (
    FORMATS, DatasetError, RatingDataset, build_local_graphs, load_ratings, split_dataset,
    synth_low_rank,
)
from .expansion import expand_graph
from .model import VARIANTS, ModelParams
from .privacy import anonymity_degree, privacy_budget
from .server import Simulation, TrainingDiverged, evaluate_rmse

log = logging.getLogger("fedgnn")

CHECKPOINT_VERSION = 1

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATASET = 4
EXIT_CHECKPOINT = 5
EXIT_DIVERGED = 6

# flag dest -> TrainConfig field
_FLAG_FIELDS = {
    "variant": "variant",
    "delta": "delta",
    "lam": "lam",
    "m": "m",
    "round_size": "round_size",
    "epochs": "epochs",
    "t_threshold": "t_threshold",
    "lr": "lr",
    "dim": "dim",
    "dropout": "dropout",
    "neighbor_cap": "neighbor_cap",
    "seed": "seed",
    "minibatch_size": "minibatch_size",
    "train_frac": "train_frac",
    "val_frac": "val_frac",
}

# grid keys accepted by ``sweep --grid``
_GRID_KEYS = {"delta": ("delta", float), "lambda": ("lam", float), "m": ("m", int)}

# synthetic dataset used by ``--dataset synthetic``
SYNTH_DEFAULTS = dict(n_users=200, n_items=200, rank=4, density=0.3, noise_std=0.0)


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--dataset", default="synthetic", help="ratings file or 'synthetic'")
    p.add_argument("--format", default="ml100k", choices=FORMATS)
    p.add_argument("--rating-min", type=float)
    p.add_argument("--rating-max", type=float)
    p.add_argument("--synth-users", type=int, default=SYNTH_DEFAULTS["n_users"])
    p.add_argument("--synth-items", type=int, default=SYNTH_DEFAULTS["n_items"])
    p.add_argument("--synth-rank", type=int, default=SYNTH_DEFAULTS["rank"])
    p.add_argument("--synth-density", type=float, default=SYNTH_DEFAULTS["density"])
    p.add_argument("--synth-noise", type=float, default=SYNTH_DEFAULTS["noise_std"])
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--delta", type=float, help="L-inf clip threshold (inf disables clipping)")
    p.add_argument("--lambda", dest="lam", type=float, help="Laplace noise scale (0 disables noise)")
    p.add_argument("--m", type=int, help="pseudo interacted items per client")
    p.add_argument("--round-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--t-threshold", type=float, help="epoch count after which expansion runs")
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--neighbor-cap", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--minibatch-size", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--val-frac", type=float)
    p.add_argument("--no-expansion", action="store_true")
    p.add_argument("--report", help="report file (train/eval) or directory (sweep/ablate)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the full protocol and score the test split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", help="write the trained model here (.npz)")

    p = sub.add_parser("eval", help="score a saved model on the test split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="grid over delta/lambda or M")
    _add_run_flags(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="axis of the grid; keys: delta, lambda, m (repeatable)")
    p.add_argument("--repeats", type=int, default=3, help="seeds per cell (seed, seed+1, ...)")

    p = sub.add_parser("ablate", help="GAT/GCN/GGNN with and without expansion")
    _add_run_flags(p)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--variants", default=",".join(VARIANTS))
    return parser


def parse_config(args, config_file=None) -> TrainConfig:
    """Flags override the file, which overrides the defaults.

    Args:
        args: parsed namespace (or dict) with flag values; ``None`` means unset.
        config_file: optional JSON file of TrainConfig fields.
    """
    values = {}
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_file} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        if "lambda" in loaded:
            loaded["lam"] = loaded.pop("lambda")
        values.update(loaded)
    flags = vars(args) if isinstance(args, argparse.Namespace) else dict(args)
    for dest, name in _FLAG_FIELDS.items():
        if flags.get(dest) is not None:
            values[name] = flags[dest]
    if flags.get("no_expansion"):
        values["expansion"] = False
    return TrainConfig.from_dict(values)


def dataset_digest(ds: RatingDataset) -> str:
    h = hashlib.sha256()
    h.update(np.array([ds.n_users, ds.n_items], dtype="<i8").tobytes())
    h.update(np.array([ds.rating_min, ds.rating_max], dtype="<f8").tobytes())
    for arr, dt in ((ds.users, "<i8"), (ds.items, "<i8"), (ds.ratings, "<f8")):
        h.update(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return h.hexdigest()[:16]


def load_dataset(args, seed: int) -> RatingDataset:
    if args.dataset == "synthetic":
        return synth_low_rank(
            args.synth_users, args.synth_items, args.synth_rank, args.synth_density,
            noise_std=args.synth_noise, seed=seed,
        )
    path = Path(args.dataset)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    return load_ratings(path, args.format, args.rating_min, args.rating_max)


@dataclass
class RunReport:
    """Everything one run produced, keyed for scripted comparison."""

    config: TrainConfig
    dataset: str
    dataset_digest: str
    round_loss: list[float]
    epoch_val_rmse: list[float]
    test_rmse: float
    mean_baseline_rmse: float
    privacy_budget: float
    anonymity_degree: float
    wall_clock_seconds: float
    expansion_round: int | None = None
    command: str = "train"
    extra: dict = field(default_factory=dict)

    def items(self):
        yield "command", self.command
        yield "dataset", self.dataset
        yield "dataset_digest", self.dataset_digest
        yield "config_digest", self.config.digest()
        for k, v in self.config.to_dict().items():
            yield f"config.{k}", v
        yield "seed", self.config.seed
        yield "rounds", len(self.round_loss)
        yield "expansion_round", "none" if self.expansion_round is None else self.expansion_round
        for i, v in enumerate(self.round_loss):
            yield f"round_loss.{i}", v
        for i, v in enumerate(self.epoch_val_rmse):
            yield f"val_rmse.{i + 1}", v
        yield "test_rmse", self.test_rmse
        yield "mean_baseline_rmse", self.mean_baseline_rmse
        yield "privacy_budget", self.privacy_budget
        yield "anonymity_degree", self.anonymity_degree
        for k, v in self.extra.items():
            yield k, v
        yield "wall_clock_seconds", self.wall_clock_seconds

    def to_text(self) -> str:
        return "".join(f"{k}\t{_fmt(v)}\n" for k, v in self.items())

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())

    def summary(self) -> str:
        c = self.config
        return "\n".join([
            f"{self.command}: {self.dataset} variant={c.variant} seed={c.seed} rounds={len(self.round_loss)}",
            f"  test RMSE          {self.test_rmse:.4f}  (global-mean baseline {self.mean_baseline_rmse:.4f})",
            f"  val RMSE by epoch  {' '.join(f'{v:.4f}' for v in self.epoch_val_rmse) or '-'}",
            f"  privacy budget     {_fmt(self.privacy_budget)}  (2*delta/lambda per round)",
            f"  anonymity degree   {_fmt(self.anonymity_degree)}",
            f"  expansion round    {'none' if self.expansion_round is None else self.expansion_round}",
            f"  wall clock         {self.wall_clock_seconds:.1f}s",
        ])


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, _, v = line.partition("\t")
        out[k] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if v is None:
        return "none"
    return str(v)


def _budget(cfg: TrainConfig) -> float:
    return privacy_budget(cfg.delta, cfg.lam) if cfg.lam > 0 else math.inf


def _mean_baseline(train: RatingDataset, test: RatingDataset) -> float:
    return float(np.sqrt(np.mean((test.ratings - train.ratings.mean()) ** 2)))


def run_train(cfg: TrainConfig, ds: RatingDataset, name: str = "dataset", threads=None):
    """Split, train, score. Returns ``(RunReport, Simulation)``."""
    start = time.perf_counter()
    train_ds, val_ds, test_ds = split_dataset(ds, cfg.train_frac, cfg.val_frac, seed=cfg.seed)
    sim = Simulation(cfg, train_ds, threads=threads)
    hist = sim.train(val_ds if len(val_ds) else None)
    report = RunReport(
        config=cfg,
        dataset=name,
        dataset_digest=dataset_digest(ds),
        round_loss=hist.round_loss,
        epoch_val_rmse=hist.epoch_val_rmse,
        test_rmse=sim.evaluate(test_ds),
        mean_baseline_rmse=_mean_baseline(train_ds, test_ds),
        privacy_budget=_budget(cfg),
        anonymity_degree=anonymity_degree(cfg.m, sim.n_clients, len(train_ds)),
        wall_clock_seconds=time.perf_counter() - start,
        expansion_round=hist.expansion_round,
    )
    return report, sim


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, sim: Simulation, ds_digest: str) -> None:
    """Versioned ``.npz`` with parameters, neighbor snapshots and the config hash."""
    cfg, params = sim.config, sim.params
    users = [u for u in sim.user_ids.tolist() if sim.graphs[u].n_neighbors]
    counts = np.array([sim.graphs[u].n_neighbors for u in users], dtype=np.int64)
    blocks = [sim.graphs[u].neighbor_embeddings for u in users]
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "config_json": np.array(json.dumps(cfg.to_dict(), sort_keys=True, default=str)),
        "config_digest": np.array(cfg.digest()),
        "dataset_digest": np.array(ds_digest),
        "variant": np.array(params.variant),
        "expanded": np.array(sim.expanded),
        "user_emb": params.user_emb,
        "item_emb": params.item_emb,
        "neighbor_users": np.array(users, dtype=np.int64),
        "neighbor_counts": counts,
        "neighbor_emb": np.vstack(blocks) if blocks else np.zeros((0, params.dim)),
    }
    for k, v in params.weights.items():
        arrays[f"w_{k}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    config_digest: str
    dataset_digest: str
    expanded: bool
    neighbors: dict[int, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CliError("checkpoint", f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["version"])
            if version != CHECKPOINT_VERSION:
                raise CliError("checkpoint", f"unsupported checkpoint version {version}", EXIT_CHECKPOINT)
            weights = {k[2:]: z[k] for k in z.files if k.startswith("w_")}
            params = ModelParams(z["user_emb"], z["item_emb"], weights, str(z["variant"]))
            bounds = np.cumsum(z["neighbor_counts"])[:-1]
            blocks = np.split(z["neighbor_emb"], bounds) if len(z["neighbor_counts"]) else []
            neighbors = dict(zip(z["neighbor_users"].tolist(), blocks))
            return Checkpoint(params, str(z["config_digest"]), str(z["dataset_digest"]),
                              bool(z["expanded"]), neighbors)
    except CliError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("checkpoint", f"unreadable checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def run_eval(cfg: TrainConfig, ds: RatingDataset, ckpt: Checkpoint, name: str = "dataset") -> RunReport:
    start = time.perf_counter()
    if ckpt.config_digest != cfg.digest():
        raise CliError(
            "checkpoint",
            f"config hash {cfg.digest()} does not match checkpoint {ckpt.config_digest}",
            EXIT_CHECKPOINT,
        )
    digest = dataset_digest(ds)
    if ckpt.dataset_digest != digest:
        raise CliError("checkpoint", "dataset differs from the one the checkpoint was trained on",
                       EXIT_CHECKPOINT)
    train_ds, val_ds, test_ds = split_dataset(ds, cfg.train_frac, cfg.val_frac, seed=cfg.seed)
    graphs = build_local_graphs(train_ds)
    if ckpt.expanded:
        for u, g in graphs.items():
            expand_graph(g, ckpt.neighbors.get(u, np.zeros((0, cfg.dim))), dim=cfg.dim)
    val = [evaluate_rmse(ckpt.params, graphs, val_ds)] if len(val_ds) else []
    return RunReport(
        config=cfg,
        dataset=name,
        dataset_digest=digest,
        round_loss=[],
        epoch_val_rmse=val,
        test_rmse=evaluate_rmse(ckpt.params, graphs, test_ds),
        mean_baseline_rmse=_mean_baseline(train_ds, test_ds),
        privacy_budget=_budget(cfg),
        anonymity_degree=anonymity_degree(cfg.m, len(graphs), len(train_ds)),
        wall_clock_seconds=time.perf_counter() - start,
        command="eval",
    )


# -- grids -------------------------------------------------------------------

def parse_grid(specs) -> list[dict]:
    """``["lambda=0.1,0.2", "delta=0.05"]`` -> list of TrainConfig overrides (cartesian product)."""
    axes = []
    seen = set()
    for spec in specs:
        key, sep, raw = spec.partition("=")
        key = key.strip()
        if not sep or key not in _GRID_KEYS:
            raise ConfigError(f"bad grid axis {spec!r}; expected KEY=V1,V2 with KEY in {sorted(_GRID_KEYS)}")
        if key in seen:
            raise ConfigError(f"grid axis {key!r} given twice")
        seen.add(key)
        name, cast = _GRID_KEYS[key]
        try:
            vals = [cast(v) for v in raw.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad value in grid axis {spec!r}") from exc
        if not vals:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append([(name, v) for v in vals])
    if not axes:
        raise ConfigError("sweep needs at least one --grid axis")
    if "m" in seen and len(seen) > 1:
        raise ConfigError("sweep either (delta, lambda) or m, not both")
    return [dict(cell) for cell in itertools.product(*axes)]


def _cell_name(overrides: dict, seed: int) -> str:
    parts = [f"{'lambda' if k == 'lam' else k}={v}" for k, v in overrides.items()]
    return ".".join(parts + [f"seed={seed}"])


def _run_cells(cells, cfg, ds, name, report_dir, threads=None):
    """Run ``(label, overrides)`` cells; returns rows of (label, seed, test_rmse)."""
    rows = []
    for label, overrides, seed in cells:
        cell_cfg = replace(cfg, seed=seed, **overrides)
        report, _ = run_train(cell_cfg, ds, name, threads=threads)
        report.command = "cell"
        report.extra["cell"] = label
        print(f"{label} seed={seed}: test RMSE {report.test_rmse:.4f}", flush=True)
        if report_dir is not None:
            report.write(Path(report_dir) / f"{label}.seed={seed}.tsv")
        rows.append((label, seed, report.test_rmse))
    return rows


def _summarize(rows, report_dir) -> str:
    by_label: dict[str, list[float]] = {}
    for label, _, rmse in rows:
        by_label.setdefault(label, []).append(rmse)
    lines = ["cell\tn\tmean_test_rmse\tstd_test_rmse"]
    for label, vals in by_label.items():
        lines.append(f"{label}\t{len(vals)}\t{np.mean(vals)!r}\t{np.std(vals)!r}")
    text = "\n".join(lines) + "\n"
    if report_dir is not None:
        Path(report_dir).mkdir(parents=True, exist_ok=True)
        (Path(report_dir) / "summary.tsv").write_text(text)
    return text


def run_sweep(cfg, ds, grid_specs, repeats, name="dataset", report_dir=None, threads=None) -> str:
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    cells = []
    for overrides in parse_grid(grid_specs):
        cell_cfg = replace(cfg, **overrides)  # validates the cell
        label = _cell_name(overrides, cell_cfg.seed).rsplit(".seed=", 1)[0]
        cells += [(label, overrides, cfg.seed + r) for r in range(repeats)]
    return _summarize(_run_cells(cells, cfg, ds, name, report_dir, threads), report_dir)


def run_ablate(cfg, ds, variants, repeats, name="dataset", report_dir=None, threads=None) -> str:
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    cells = []
    for v in variants:
        for expansion in (True, False):
            label = f"{v}.{'with' if expansion else 'without'}-expansion"
            cells += [(label, {"variant": v, "expansion": expansion}, cfg.seed + r) for r in range(repeats)]
    return _summarize(_run_cells(cells, cfg, ds, name, report_dir, threads), report_dir)


# -- entry point -------------------------------------------------------------

def _dispatch(args) -> int:
    cfg = parse_config(args, args.config)
    ds = load_dataset(args, cfg.seed)
    name = args.dataset
    if args.command == "train":
        report, sim = run_train(cfg, ds, name)
        if args.checkpoint:
            save_checkpoint(args.checkpoint, sim, report.dataset_digest)
    elif args.command == "eval":
        report = run_eval(cfg, ds, load_checkpoint(args.checkpoint), name)
    elif args.command == "sweep":
        print(run_sweep(cfg, ds, args.grid, args.repeats, name, args.report), end="")
        return EXIT_OK
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        print(run_ablate(cfg, ds, variants, args.repeats, name, args.report), end="")
        return EXIT_OK
    if args.report:
        report.write(args.report)
    print(report.summary())
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CliError as exc:
        err = exc
    except ConfigError as exc:
        err = CliError("config", str(exc), EXIT_CONFIG)
    except DatasetError as exc:
        err = CliError("dataset", str(exc), EXIT_DATASET)
    except TrainingDiverged as exc:
        err = CliError("diverged", str(exc), EXIT_DIVERGED)
    except ValueError as exc:
        err = CliError("config", str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - last-resort category for scripts
        log.debug("unhandled", exc_info=True)
        err = CliError("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    print(f"error[{err.category}]: {err}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
