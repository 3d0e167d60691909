import json
import math

import numpy as np
import pytest

from fedgnn.cli import (
    EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATASET, EXIT_USAGE, build_parser, load_checkpoint, main,
    parse_config, parse_grid, read_report,
)
from fedgnn.config import ConfigError, TrainConfig

FAST = ["--dataset", "synthetic", "--synth-users", "30", "--synth-items", "40", "--m", "5",
        "--round-size", "10", "--dim", "8", "--lr", "0.5", "--neighbor-cap", "4"]


def _cfg(*argv, config_file=None):
    return parse_config(build_parser().parse_args(["train", *argv]), config_file)


def test_defaults():
    c = _cfg()
    assert (c.delta, c.lam, c.m, c.round_size, c.dim, c.lr, c.t_threshold, c.epochs, c.dropout) == (
        0.1, 0.2, 1000, 128, 256, 0.01, 2, 3, 0.2)
    assert c == TrainConfig()


def test_flag_overrides_file_overrides_defaults(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"lambda": 0.5, "dim": 16, "delta": "inf"}))
    c = _cfg("--dim", "32", config_file=f)
    assert c.lam == 0.5 and c.dim == 32 and c.delta == math.inf and c.m == 1000
    assert _cfg("--lambda", "0").lam == 0.0
    assert _cfg("--no-expansion").expansion is False


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        _cfg("--m", "-5")
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError, match="unknown"):
        _cfg(config_file=f)
    f.write_text(json.dumps({"dim": "wide"}))
    with pytest.raises(ConfigError, match="expected int"):
        _cfg(config_file=f)
    f.write_text(json.dumps({"expansion": 1}))
    with pytest.raises(ConfigError):
        _cfg(config_file=f)
    f.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        _cfg(config_file=f)
    with pytest.raises(ConfigError):
        _cfg(config_file=tmp_path / "missing.json")


def test_config_digest_tracks_every_field():
    a = TrainConfig()
    assert a.digest() == TrainConfig().digest()
    assert a.digest() != TrainConfig(seed=1).digest()
    assert TrainConfig.from_dict(a.to_dict()) == a


def test_parse_grid():
    cells = parse_grid(["lambda=0.1,0.2", "delta=0.05,0.1"])
    assert len(cells) == 4 and {"lam": 0.1, "delta": 0.05} in cells
    assert parse_grid(["m=0,10"]) == [{"m": 0}, {"m": 10}]
    for bad in (["x=1"], ["lambda"], ["m=0", "lambda=0.1"], ["m=a"], ["m="], []):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_train_report_and_eval_round_trip(tmp_path, capsys):
    rep, ck = tmp_path / "r.tsv", tmp_path / "m.npz"
    assert main(["train", *FAST, "--report", str(rep), "--checkpoint", str(ck)]) == 0
    out = capsys.readouterr().out
    assert "test RMSE" in out and "privacy budget" in out
    r = read_report(rep)
    assert r["privacy_budget"] == "1.0"
    assert int(r["rounds"]) == 3 * 30 // 10
    assert r["expansion_round"] == "6"
    assert len([k for k in r if k.startswith("val_rmse.")]) == 3
    assert float(r["anonymity_degree"]) > 1
    for key in ("wall_clock_seconds", "seed", "config_digest", "dataset_digest", "test_rmse"):
        assert key in r

    rep2 = tmp_path / "e.tsv"
    assert main(["eval", *FAST, "--checkpoint", str(ck), "--report", str(rep2)]) == 0
    assert read_report(rep2)["test_rmse"] == r["test_rmse"]

    ckpt = load_checkpoint(ck)
    assert ckpt.expanded and ckpt.neighbors
    assert all(v.shape[1] == 8 for v in ckpt.neighbors.values())


def test_reports_deterministic(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    main(["train", *FAST, "--report", str(a)])
    main(["train", *FAST, "--report", str(b)])
    ra, rb = read_report(a), read_report(b)
    ra.pop("wall_clock_seconds"), rb.pop("wall_clock_seconds")
    assert ra == rb


def test_eval_refuses_mismatched_checkpoint(tmp_path, capsys):
    ck = tmp_path / "m.npz"
    assert main(["train", *FAST, "--checkpoint", str(ck)]) == 0
    assert main(["eval", *FAST, "--lr", "0.6", "--checkpoint", str(ck)]) == EXIT_CHECKPOINT
    assert "error[checkpoint]" in capsys.readouterr().err
    assert main(["eval", *FAST, "--synth-rank", "3", "--checkpoint", str(ck)]) == EXIT_CHECKPOINT
    assert main(["eval", *FAST, "--checkpoint", str(tmp_path / "none.npz")]) == EXIT_CHECKPOINT
    (tmp_path / "junk.npz").write_bytes(b"junk")
    assert main(["eval", *FAST, "--checkpoint", str(tmp_path / "junk.npz")]) == EXIT_CHECKPOINT


def test_error_categories(tmp_path, capsys):
    assert main(["train", "--m", "-5"]) == EXIT_CONFIG
    assert "error[config]" in capsys.readouterr().err
    assert main(["train", "--dataset", str(tmp_path / "nope")]) == EXIT_DATASET
    assert "error[dataset]" in capsys.readouterr().err
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert "error[usage]" in capsys.readouterr().err
    assert main(["eval"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_generic_tsv_dataset(tmp_path):
    rng = np.random.default_rng(0)
    lines = [f"{u}\t{i}\t{rng.integers(1, 6)}" for u in range(12) for i in range(15) if rng.random() < 0.5]
    path = tmp_path / "r.tsv"
    path.write_text("\n".join(lines) + "\n")
    rep = tmp_path / "r.report"
    args = ["train", "--dataset", str(path), "--format", "generic-tsv", "--rating-min", "1",
            "--rating-max", "5", "--m", "2", "--round-size", "4", "--dim", "4"]
    assert main(args + ["--report", str(rep)]) == 0
    assert read_report(rep)["dataset"] == str(path)


def test_sweep_writes_cells_and_summary(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", *FAST, "--grid", "lambda=0.1,0.3", "--repeats", "2", "--report", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert "summary.tsv" in files and len(files) == 5
    summary = (out / "summary.tsv").read_text().splitlines()
    assert summary[0].startswith("cell\t") and len(summary) == 3
    assert "lambda=0.3" in capsys.readouterr().out


def test_ablate_cells(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", *FAST, "--variants", "gcn", "--repeats", "1", "--report", str(out)]) == 0
    rows = (out / "summary.tsv").read_text().splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["gcn.with-expansion", "gcn.without-expansion"]
    assert main(["ablate", *FAST, "--variants", "gin", "--repeats", "1"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "fedgnn", "train", "--m", "-1"], capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG and "error[config]" in res.stderr


def test_diverged_category(capsys):
    from fedgnn.cli import EXIT_DIVERGED

    with np.errstate(all="ignore"):
        code = main(["train", *FAST, "--lr", "1e6", "--lambda", "0", "--delta", "inf", "--m", "0"])
    assert code == EXIT_DIVERGED
    assert "error[diverged]" in capsys.readouterr().err
