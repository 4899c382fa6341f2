import json

import pytest

from trajlab import cli
from trajlab.trajectory import TrajectoryDataset


def _small(tmp_path, **over):
    cfg = {"out_dir": str(tmp_path / "run"), "seed": 3,
           "demand": {"n": 200, "route_choice": {"kind": "Fixed"}},
           "model": {"kind": "mmc"},
           "sample": {"n": 50, "max_len": 20},
           "eval": {"cpp_k": [1, 2]}}
    return cli.deep_merge(cfg, over)


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_precedence_and_seed_resolution(monkeypatch):
    monkeypatch.delenv("TRAJLAB_SEED", raising=False)
    cfg = cli.resolve_config({"demand": {"n": 10}}, {"demand": {"n": 99, "split_ratio": 0.5}})
    assert cfg["demand"]["n"] == 10 and cfg["demand"]["split_ratio"] == 0.5
    assert cfg["seed"] == 0 and cfg["sample"]["seed"] == 1
    monkeypatch.setenv("TRAJLAB_SEED", "7")
    assert cli.resolve_config()["seed"] == 7
    cfg = cli.resolve_config({"seed": 5, "demand": {"seed": 11}}, seed=2)
    assert cfg["seed"] == 2 and cfg["demand"]["seed"] == 2
    assert cli.resolve_config({"seed": 5, "demand": {"seed": 11}})["demand"]["seed"] == 11


def test_config_errors():
    for bad in ({"nope": 1}, {"demand": {"pattern": "X"}}, {"model": {"kind": "trn"}},
                {"demand": {"split_ratio": 1.5}}, {"demand": {"route_choice": {"kind": "Q"}}},
                {"model": {"trajgail": {"bogus": 1}}}):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config(bad)


def test_run_pipeline_minimal_fixed(tmp_path):
    code = cli.main(["run", "--config", _write(tmp_path, _small(tmp_path)), "--workers", "1"])
    assert code == 0
    out = tmp_path / "run"
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "OK"
    assert man["sizes"] == {"n": 200, "train": 140, "test": 60, "generated": 50, "incomplete": 0}
    for a in man["artifacts"].values():
        assert (out / a["path"]).exists() and len(a["sha256"]) == 64
    rep = json.loads((out / "report.json").read_text())
    row = rep["models"]["mmc"]
    assert row["bleu_mean"] == 1.0 and row["d_js"] == 0.0
    assert row["auc_k1"] == pytest.approx(1.0)
    persisted = json.loads((out / "config.json").read_text())
    assert persisted["demand"]["n"] == 200 and "workers" not in persisted
    # rerun from the persisted config reproduces every artifact
    first = {k: v["sha256"] for k, v in man["artifacts"].items()}
    again = cli.deep_merge(persisted, {"out_dir": str(tmp_path / "again")})
    assert cli.main(["run", "--config", _write(tmp_path, again, "again.json"), "--workers", "2"]) == 0
    man2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    second = {k: v["sha256"] for k, v in man2["artifacts"].items()}
    assert first.pop("config") != second.pop("config")       # out_dir differs
    assert first == second


def test_split_sizes_recorded(tmp_path):
    cfg = cli.resolve_config(_small(tmp_path, demand={"n": 20000}, sample={"n": 10},
                                    eval={"cpp_k": []}), seed=0)
    cfg["workers"] = 1
    man = cli.run_pipeline(cfg)
    assert man["sizes"]["train"] == 14000 and man["sizes"]["test"] == 6000


def test_failed_stage_is_marked(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise cli.ev.EvaluationError("broken metric")

    monkeypatch.setattr(cli, "evaluate", boom)
    code = cli.main(["run", "--config", _write(tmp_path, _small(tmp_path)), "--workers", "1"])
    assert code == cli.EXIT_EVAL
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "FAILED" and man["stage"] == "eval"
    assert "generated" in man["artifacts"]


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    bad = _write(tmp_path, {"model": {"kind": "warp"}})
    assert cli.main(["run", "--config", bad]) == cli.EXIT_CONFIG

    def diverge(*a, **k):
        raise cli.TrainingDivergence("nan")

    monkeypatch.setattr(cli, "train_model", diverge)
    assert cli.main(["run", "--config", _write(tmp_path, _small(tmp_path))]) == cli.EXIT_DIVERGED


def test_subcommands_chain(tmp_path):
    d = tmp_path
    s = ["--seed", "4", "--workers", "1"]
    assert cli.main(["net", "--out", str(d / "net.json")] + s) == 0
    assert cli.main(["demand", "--net", str(d / "net.json"), "--n", "300", "--pattern", "OneWayMultiOD",
                     "--out", str(d / "ds.jsonl")] + s) == 0
    assert len(TrajectoryDataset.load(str(d / "ds.train.jsonl"))) == 210
    assert cli.main(["train", "--net", str(d / "net.json"), "--data", str(d / "ds.train.jsonl"),
                     "--model", "maxent_svf", "--iters", "20", "--out", str(d / "m.tlab")] + s) == 0
    assert json.loads((d / "m.tlab.json").read_text())["model_kind"] == "maxent_svf"
    assert cli.main(["sample", "--model-file", str(d / "m.tlab"), "--net", str(d / "net.json"),
                     "--n", "40", "--max-len", "30", "--out", str(d / "gen.jsonl")] + s) == 0
    assert cli.main(["eval", "--real", str(d / "ds.test.jsonl"), "--generated", str(d / "gen.jsonl"),
                     "--reference", str(d / "ds.train.jsonl"), "--model-file", str(d / "m.tlab"),
                     "--net", str(d / "net.json"), "--name", "svf", "--out", str(d / "ev")] + s) == 0
    assert "svf" in json.loads((d / "ev.json").read_text())["models"]
    assert (d / "ev.svf.ccdf.csv").exists()
    assert cli.main(["report", "--real", str(d / "ds.test.jsonl"), "--generated",
                     f"svf={d / 'gen.jsonl'}", f"self={d / 'ds.test.jsonl'}", "--out", str(d / "rep")] + s) == 0
    rep = json.loads((d / "rep.json").read_text())
    assert rep["models"]["self"]["d_js"] == 0.0 and set(rep["models"]) == {"svf", "self"}
    assert cli.main(["tessellate", "--net", str(d / "net.json"), "--radius", "150", "--data",
                     str(d / "ds.train.jsonl"), "--out", str(d / "part.json"), "--cells-out",
                     str(d / "cells.jsonl")] + s) == 0
    assert cli.main(["train", "--net", str(d / "net.json"), "--data", str(d / "cells.jsonl"),
                     "--granularity", "cell", "--model", "trn", "--partition", str(d / "part.json"),
                     "--out", str(d / "trn.tlab")] + s) == 0
    assert cli.main(["sample", "--model-file", str(d / "trn.tlab"), "--n", "10", "--max-len", "30",
                     "--out", str(d / "cgen.jsonl")] + s) == 0
    assert cli.main(["report", "--real", str(d / "ds.test.jsonl"), "--generated", "oops", "--out", str(d / "x")] + s) == 2
