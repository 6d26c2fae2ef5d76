import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import four_event_sequence
from tga import numerics as nx
from tga.cli import ablation_report, ablation_views, main, read_config_file, UsageError
from tga.data import load_jsonl, write_jsonl
from tga.events import Candidate, Sample

FOUR_EVENT_DUMP = (
    "# sample 0: 4 nodes, 6 edges\n"
    "0 2 item click cart\n"
    "0 1 category click click\n"
    "0 1 neighbor click click\n"
    "1 2 category click cart\n"
    "1 2 neighbor click cart\n"
    "2 3 neighbor cart click\n"
)

SMALL_GEN = ["--set", "gen.seq_len_min=4", "--set", "gen.seq_len_max=24", "--set", "gen.n_items=40",
             "--set", "gen.n_categories=4", "--set", "gen.rate_cart=0.2", "--set", "gen.profile_dim=4"]
SMALL_MODEL = ["--d", "4", "--heads", "2", "--set", "model.d_k=4", "--set", "model.d_v=4",
               "--set", "model.v_item=64", "--set", "model.v_cat=16", "--set", "model.profile_dim=4",
               "--set", "model.mlp_hidden=8,4", "--set", "model.max_positions=64"]


@pytest.fixture
def four_event_file(tmp_path):
    path = tmp_path / "four.jsonl"
    write_jsonl([Sample(np.zeros(2), four_event_sequence(), Candidate(101, 7), 1)], path)
    return path


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "build-graph" in capsys.readouterr().out


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "tga.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--no-such-flag"],
    ["train", "--set", "model.nope=3"],
    ["train", "--set", "model.d=abc"],
    ["build-graph"],
    ["bench", "--lengths", "a,b"],
])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.strip()


def test_runtime_failure_exits_two(tmp_path, capsys):
    assert main(["build-graph", "--input", str(tmp_path / "missing.jsonl")]) == 2
    assert "missing.jsonl" in capsys.readouterr().err
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["build-graph", "--input", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_build_graph_dump_is_byte_identical(four_event_file, tmp_path, capsys):
    outputs = []
    for run in range(2):
        assert main(["build-graph", "--input", str(four_event_file), "--dump", "--out", str(tmp_path / f"o{run}")]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1] == FOUR_EVENT_DUMP
    assert (tmp_path / "o0" / "graph_dump.txt").read_bytes() == FOUR_EVENT_DUMP.encode()


def test_build_graph_views_flag(four_event_file, capsys):
    assert main(["build-graph", "--input", str(four_event_file), "--dump", "--views", "item"]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["0 2 item click cart"]


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmodel.d = 8   # trailing\n\ntrain.lr=0.01\ntrain.enabled_views=item,category\n")
    assert read_config_file(cfg) == {
        "model": {"d": 8},
        "train": {"lr": 0.01, "enabled_views": ("item", "category")},
    }
    cfg.write_text("model.d\n")
    with pytest.raises(UsageError, match="run.cfg:1"):
        read_config_file(cfg)


def test_precedence_defaults_file_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gen.n_users=7\ngen.seq_len_min=3\ngen.seq_len_max=9\n")
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--n-users", "5", "--n-valid", "2", "--out", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_train"] == 5                          # flag beats file
    assert info["generator"]["seq_len_max"] == 9         # file beats default
    assert info["generator"]["n_items"] == 1000          # default kept
    assert len(list(load_jsonl(out / "train.jsonl"))) == 5
    assert len(list(load_jsonl(out / "valid.jsonl"))) == 2


def test_gen_data_is_seeded(tmp_path, capsys):
    for name, seed in (("a", "3"), ("b", "3"), ("c", "4")):
        assert main(["gen-data", "--n-users", "6", "--n-valid", "2", "--seed", seed,
                     "--out", str(tmp_path / name), *SMALL_GEN]) == 0
    capsys.readouterr()
    a, b, c = ((tmp_path / n / "train.jsonl").read_bytes() for n in "abc")
    assert a == b and a != c


def test_train_eval_round_trip(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--n-users", "40", "--n-valid", "20", "--out", str(data), *SMALL_GEN]) == 0
    capsys.readouterr()
    argv = ["train", "--train", str(data / "train.jsonl"), "--valid", str(data / "valid.jsonl"),
            "--epochs", "2", "--batch-size", "8", "--lr", "0.01", "--seed", "1", "--out", str(run), *SMALL_MODEL]
    assert main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# config ")
    echoed = json.loads(lines[0][len("# config "):])
    assert echoed["model"]["d"] == 4 and echoed["train"]["lr"] == 0.01 and echoed["train"]["seed"] == 1
    summary = json.loads(lines[-1])
    assert {p.name for p in run.iterdir()} == {"header.json", "train_log.csv", "best.ckpt"}
    assert json.loads((run / "header.json").read_text())["cli"]["train"]["batch_size"] == 8

    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--input", str(data / "valid.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"auc", "n", "pos_rate", "logloss"}
    assert report["n"] == 20
    assert abs(report["auc"] - summary["best_valid_auc"]) < 1e-9

    # same seed, same log
    assert main(argv[:-len(SMALL_MODEL) - 2] + ["--out", str(tmp_path / "run2"), *SMALL_MODEL]) == 0
    capsys.readouterr()
    assert (run / "train_log.csv").read_text() == (tmp_path / "run2" / "train_log.csv").read_text()


def test_eval_rejects_foreign_checkpoint(tmp_path, capsys):
    store = nx.ParameterStore()
    store.zeros("w", (2,))
    nx.save_checkpoint(tmp_path / "x.ckpt", store)
    data = tmp_path / "d.jsonl"
    write_jsonl([Sample(np.zeros(2), four_event_sequence(), Candidate(1, 7), 1)], data)
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--input", str(data)]) == 2
    assert "model config" in capsys.readouterr().err


def test_bench_writes_csv(tmp_path, capsys):
    argv = ["bench", "--lengths", "8,16", "--repeats", "1", "--batch-size", "1", "--layers", "1",
            "--out", str(tmp_path), *SMALL_MODEL]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "model,L,fwd_ms,train_ms,samples_per_s" in out and "parameter counts" in out
    csv = (tmp_path / "bench.csv").read_text().splitlines()
    assert [row.split(",")[:2] for row in csv[1:]] == [["tga", "8"], ["tga", "16"],
                                                        ["transformer", "8"], ["transformer", "16"]]
    assert {"bench.csv", "ratios.txt", "parity.csv"} <= {p.name for p in tmp_path.iterdir()}


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--probes", "15", "--layers", "2", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    table = [l.split(",") for l in lines[1:]]
    assert table[0] == ["module", "probes", "max_rel_error", "status"]
    modules = {row[0] for row in table[1:]}
    assert modules == {"embedding", "layer1", "layer2", "head"}
    assert all(row[3] == "ok" for row in table[1:])


def test_ablation_views_and_report():
    assert ablation_views("full") == ("item", "category", "neighbor")
    assert ablation_views("minus-item") == ("category", "neighbor")
    results = {("full", 0): 0.70, ("minus-item", 0): 0.68, ("minus-category", 0): 0.71,
               ("minus-neighbor", 0): 0.70}
    report = ablation_report(results, [0])
    assert "minus-item,0,0.680000,-0.020000" in report
    assert "minus-category,0.710000,+0.010000,0/1" in report


def test_ablate_runs_four_variants(tmp_path, capsys):
    argv = ["ablate", "--n-users", "24", "--n-valid", "12", "--epochs", "1", "--batch-size", "12",
            "--seeds", "0,1", "--out", str(tmp_path), *SMALL_GEN, *SMALL_MODEL]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.count("\nminus-") >= 6
    runs = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert len(runs) == 8 and "minus-neighbor_seed1" in runs
    assert (tmp_path / "ablation.csv").exists()
