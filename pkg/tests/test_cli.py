import csv
import hashlib
import json

import pytest

from popco.cli import main
from popco.instances import load_instances


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["generate", "--problem", "tsp", "--n", "8", "--count", "12", "--seed", "1",
                 "--out", str(d / "t8.bin")]) == 0
    assert main(["oracle", "--method", "held_karp", "--instances", str(d / "t8.bin"),
                 "--out", str(d / "hk.csv")]) == 0
    assert main(["train", "--problem", "tsp", "--n", "8", "--num-starts", "4", "--K", "2",
                 "--batch-size", "8", "--steps", "6,3,6", "--no-timing", "--out", str(d / "run")]) == 0
    return d


def test_generate_is_reproducible(tmp_path):
    args = ["generate", "--problem", "cvrp", "--n", "10", "--count", "5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.bin")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.bin")]) == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")
    assert len(load_instances(tmp_path / "a.bin")) == 5
    m = json.loads((tmp_path / "a.bin.manifest.json").read_text())
    assert m["outputs"][str(tmp_path / "a.bin")] == sha(tmp_path / "a.bin")
    assert m["seeds"]["seed"] == 3


def test_usage_errors(tmp_path, capsys):
    assert main(["generate", "--problem", "tsp", "--n", "5", "--count", "2"]) == 1
    assert main(["generate", "--problem", "tsp", "--count", "2", "--out", str(tmp_path / "x")]) == 1
    assert main(["report"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["train", "--problem", "tsp", "--steps", "1,2", "--out", str(tmp_path)]) == 1


def test_data_errors(tmp_path, trained):
    assert main(["generate", "--problem", "tsp", "--n", "1", "--count", "2", "--out", str(tmp_path / "x")]) == 2
    big = tmp_path / "t20.bin"
    assert main(["generate", "--problem", "tsp", "--n", "20", "--count", "2", "--out", str(big)]) == 0
    assert main(["oracle", "--method", "held_karp", "--instances", str(big), "--out", str(tmp_path / "o.csv")]) == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert main(["oracle", "--method", "held_karp", "--instances", str(bad), "--out", str(tmp_path / "o.csv")]) == 2
    kp = tmp_path / "kp.bin"
    assert main(["generate", "--problem", "kp", "--n", "8", "--count", "2", "--out", str(kp)]) == 0
    assert main(["eval", "--checkpoint", str(trained / "run" / "phase3.ckpt"), "--instances", str(kp),
                 "--out", str(tmp_path / "e.csv")]) == 2


def test_print_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("problem = toy\nlearning_rate = 0.01  # comment\nseed = 4\n")
    assert main(["train", "--config", str(cfg), "--seed", "9", "--set", "batch_size=7", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "learning_rate = 0.01\n" in out
    assert "seed = 9\n" in out and "batch_size = 7\n" in out and "problem = toy\n" in out
    cfg.write_text("problem = toy\nbogus = 1\n")
    assert main(["train", "--config", str(cfg), "--print-config"]) == 2


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "train_log.csv", "manifest.json"):
        assert (run / name).exists()
    log = rows(run / "train_log.csv")
    assert list(log[0]) == ["step", "phase", "mean_agent_reward", "population_reward", "loss", "wall_ms"]
    assert len(log) == 15
    assert {r["wall_ms"] for r in log} == {"0"}
    m = json.loads((run / "manifest.json").read_text())
    assert m["config"]["population"] == 2 and m["config"]["phase3_steps"] == 6


def test_resume_is_bit_identical(trained, tmp_path):
    run = trained / "run"
    assert main(["train", "--problem", "tsp", "--n", "8", "--num-starts", "4", "--K", "2", "--batch-size", "8",
                 "--steps", "6,3,6", "--phases", "3", "--resume", str(run / "phase2.ckpt"),
                 "--no-timing", "--out", str(tmp_path / "r")]) == 0
    assert sha(tmp_path / "r" / "phase3.ckpt") == sha(run / "phase3.ckpt")


def test_resume_shape_mismatch(trained, tmp_path):
    run = trained / "run"
    assert main(["train", "--problem", "tsp", "--n", "8", "--num-starts", "4", "--K", "3", "--batch-size", "8",
                 "--steps", "6,3,6", "--phases", "3", "--resume", str(run / "phase2.ckpt"),
                 "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--problem", "tsp", "--set", "embed_dim=16", "--set", "key_dim=4", "--phases", "3",
                 "--resume", str(run / "phase2.ckpt"), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--problem", "tsp", "--phases", "3", "--out", str(tmp_path / "r")]) == 1


def test_eval_and_report(trained, tmp_path, capsys):
    ck, inst, ref = trained / "run" / "phase3.ckpt", trained / "t8.bin", trained / "hk.csv"
    g, s, p = tmp_path / "g.csv", tmp_path / "s.csv", tmp_path / "p.csv"
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(inst), "--reference", str(ref),
                 "--out", str(g)]) == 0
    out = rows(g)
    assert list(out[0]) == ["instance_id", "best_obj", "ref_obj", "gap_pct", "n_trajectories"]
    assert len(out) == 13 and out[-1]["instance_id"] == "mean"
    assert all(float(r["gap_pct"]) >= 0 for r in out)
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(inst), "--budget", "40", "--augment",
                 "--reference", str(ref), "--out", str(tmp_path / "x.csv")]) == 2
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(inst), "--budget", "160",
                 "--reference", str(ref), "--out", str(s)]) == 0
    assert all(r["n_trajectories"] == "160" for r in rows(s)[:-1])
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(inst), "--reference", str(ref),
                 "--pareto", "budgets=1x,2x,5x,10x", "--out", str(p)]) == 0
    pr = rows(p)
    assert len(pr) == 4 and list(pr[0]) == ["budget", "mean_gap"]
    capsys.readouterr()
    assert main(["report", str(g), str(s), "--names", "greedy,sampled", "--out", str(tmp_path / "r.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:3] == ["Method", "Obj.", "Gap"]
    assert [line.split()[0] for line in table[1:]] == ["greedy", "sampled"]


def test_report_mismatched_ids(trained, tmp_path, capsys):
    ck = trained / "run" / "phase3.ckpt"
    other = tmp_path / "o.bin"
    assert main(["generate", "--problem", "tsp", "--n", "8", "--count", "5", "--out", str(other)]) == 0
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(trained / "t8.bin"), "--out", str(a)]) == 0
    assert main(["eval", "--checkpoint", str(ck), "--instances", str(other), "--out", str(b)]) == 0
    capsys.readouterr()
    assert main(["report", str(a), str(b)]) == 2
    assert "row 5" in capsys.readouterr().err


def test_oracle_csv(trained):
    out = rows(trained / "hk.csv")
    assert len(out) == 12
    assert list(out[0]) == ["instance_id", "objective", "method"]
    assert {r["method"] for r in out} == {"held_karp"}


def test_workers_env_default(monkeypatch, tmp_path):
    monkeypatch.setenv("POPPY_WORKERS", "3")
    from popco.cli import build_parser
    args = build_parser().parse_args(["oracle", "--method", "kp_exact", "--instances", "x", "--out", "y"])
    assert args.workers == 3


@pytest.mark.parametrize("name", ["tsp10", "kp20", "cvrp10", "toy", "full_tsp100"])
def test_shipped_configs_parse(name, capsys):
    from pathlib import Path
    path = Path(__file__).parent.parent / "configs" / f"{name}.cfg"
    assert main(["train", "--config", str(path), "--print-config"]) == 0
    assert "problem = " in capsys.readouterr().out
