import json

from mocl.cli import main

from conftest import write_config

def test_run_is_byte_identical_across_executions(tmp_path, capsys):
    a = write_config(tmp_path, "a.toml", out="a")
    b = write_config(tmp_path, "b.toml", out="b")
    assert main(["run", "--config", str(a)]) == 0
    assert main(["run", "--config", str(b)]) == 0
    ma = (tmp_path / "a/mocl/1/metrics.json").read_bytes()
    assert ma == (tmp_path / "b/mocl/1/metrics.json").read_bytes()
    doc = json.loads(ma)
    assert doc["seed"] == 1 and doc["method"] == "mocl" and set(doc["protocols"]) == {"TIL", "CIL"}
    assert "mocl seed=1" in capsys.readouterr().out


def test_three_seeds_give_three_metric_files_and_an_aggregate(tmp_path):
    cfg = write_config(tmp_path, method="per_task", seeds=(1, 2, 3), out="nested/runs")
    assert main(["run", "--config", str(cfg)]) == 0
    root = tmp_path / "nested/runs/per_task"
    assert sorted(p.parent.name for p in root.glob("*/metrics.json")) == ["1", "2", "3"]
    agg = json.loads((root / "aggregate.json").read_text())
    assert agg["seeds"] == [1, 2, 3]
    # per_task carries no transfer by construction
    assert agg["protocols"]["TIL"]["fwt"]["mean"] == 0.0


def test_staged_pipeline_reproduces_run(tmp_path):
    run = write_config(tmp_path, "run.toml", out="r")
    staged = write_config(tmp_path, "staged.toml", out="s")
    assert main(["run", "--config", str(run)]) == 0
    for stage in ("gen-data", "train", "eval"):
        assert main([stage, "--config", str(staged), "--seed", "1"]) == 0
    for name in ("metrics.json", "acc_til.csv", "acc_cil.csv", "reference.csv", "heatmap.csv"):
        assert (tmp_path / "r/mocl/1" / name).read_bytes() == (tmp_path / "s/mocl/1" / name).read_bytes()


def test_eval_refuses_artifacts_from_another_config(tmp_path, capsys):
    first = write_config(tmp_path, "first.toml", out="x")
    assert main(["gen-data", "--config", str(first)]) == 0
    assert main(["train", "--config", str(first)]) == 0
    other = write_config(tmp_path, "other.toml", out="x", lr=1e-3)
    assert main(["eval", "--config", str(other)]) == 2
    assert "config" in capsys.readouterr().err


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('method = "nope"\n')
    assert main(["run", "--config", str(bad)]) == 2
    bad.write_text('method = "mocl"\n[train]\nlearning_rate = 1\n')
    assert main(["run", "--config", str(bad)]) == 2
    bad.write_text('method = "mocl"\n[train]\nlr = -1.0\n')
    assert main(["run", "--config", str(bad)]) == 2
    bad.write_text('method = "mocl"\n[peft]\nkind = "adapter"\n')
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 4
    (tmp_path / "blocker").write_text("")
    blocked = write_config(tmp_path, "blocked.toml", out="blocker/sub")
    assert main(["run", "--config", str(blocked)]) == 4
    diverge = write_config(tmp_path, "diverge.toml", out="d", lr=1e300)
    assert main(["run", "--config", str(diverge)]) == 3


def test_fwt_on_hand_written_files(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("task,a,b,c\na,0.5,,\nb,0.4,0.7,\nc,0.3,0.6,0.9\n")
    (tmp_path / "r.csv").write_text("task,reference\na,0.5\nb,0.6\nc,0.6\n")
    assert main(["fwt", "--matrix", str(tmp_path / "m.csv"), "--reference", str(tmp_path / "r.csv")]) == 0
    # ((0.7 - 0.6) + (0.9 - 0.6)) / 2 = 0.2; final row mean (0.3 + 0.6 + 0.9) / 3 = 0.6
    assert capsys.readouterr().out.strip() == "fwt=0.200000 avg=0.600000"
    (tmp_path / "r.csv").write_text("task,reference\na,0.5\n")
    assert main(["fwt", "--matrix", str(tmp_path / "m.csv"), "--reference", str(tmp_path / "r.csv")]) == 2


def test_heatmap_command_is_idempotent(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out/mocl/1/checkpoints/stage_2"
    suite = tmp_path / "out/data/seed_1/suite.jsonl"
    args = ["heatmap", "--checkpoint", str(ckpt), "--suite", str(suite)]
    assert main(args + ["--out", str(tmp_path / "h1.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "h2.csv")]) == 0
    assert (tmp_path / "h1.csv").read_bytes() == (tmp_path / "h2.csv").read_bytes()
    assert (tmp_path / "h1.csv").read_bytes() == (tmp_path / "out/mocl/1/heatmap.csv").read_bytes()
