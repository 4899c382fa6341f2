"""Command-line front end: reproducible experiments from JSON configs.

Precedence for every setting is defaults < command-line flags < config
file, except ``--seed``, which overrides the config file's seeds. The
merged, fully resolved config is written next to the outputs.

Exit codes: 0 success, 2 config error, 3 training divergence,
4 evaluation error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import demandgen as dg
from . import eval as ev
from . import roadnet as rn
from . import tessellate as tz
from .models import (CellEnv, GailConfig, LinkEnv, TrainingDivergence, arnn_train, fit_transition,
                     gail_train, load_model, maxent_train, rnn_train, rollout_sample, save_model)
from .models.sampling import SamplingError
from .ndcore import RecurrentCellConfig
from .parallel import default_workers
from .trajectory import TrajectoryDataset

log = logging.getLogger("trajlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_EVAL = 0, 2, 3, 4
MODEL_KINDS = ("mmc", "trn", "rnn", "arnn", "maxent_svf", "maxent_savf", "trajgail")
PATTERNS = ("SingleOD", "OneWayMultiOD", "TwoWayMultiOD")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": None,
    "workers": None,
    "out_dir": "run",
    "granularity": "link",
    "network": {"rows": 4, "cols": 4, "block_length_m": 200.0},
    "demand": {"pattern": "SingleOD", "major_weight": 10.0, "background_weight": 1.0,
               "route_choice": {"kind": "Logit", "theta": 1.0, "alpha": 2.0, "beta_cf": 1.0,
                                "gamma_cf": 1.0, "p": 0.3, "slack": 0},
               "n": 20000, "depart_horizon_min": 60.0, "link_travel_min": 1.0,
               "split_ratio": 0.7, "seed": None},
    "tessellation": {"radius_m": 150.0},
    "model": {"kind": "trajgail", "seed": None,
              "rnn": {"cell": "LSTM", "hidden": 64, "layers": 3, "epochs": 20, "lr": 5e-3,
                      "batch_size": 128, "attn_size": 32},
              "maxent": {"iters": 200, "lr": 0.1, "tol": 1e-3, "horizon": None},
              "trajgail": {k: v for k, v in vars(GailConfig()).items() if k != "seed"}},
    "sample": {"n": 20000, "max_len": 40, "seed": None},
    "eval": {"reference": "train", "n_score": None, "cpp_k": [1, 2, 3], "cpp_g": 1},
}


# -- config handling ----------------------------------------------------------------
def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(d, ref, where):
    for k, v in d.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(ref[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be an object")
            _check_keys(v, ref[k], f"{where}{k}.")


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg):
    """Structural and value checks; raises ConfigError."""
    _check_keys(cfg, DEFAULTS, "")
    d, m = cfg["demand"], cfg["model"]
    _need(cfg["granularity"] in ("link", "cell"), "granularity must be link or cell")
    _need(d["pattern"] in PATTERNS, f"demand.pattern must be one of {PATTERNS}")
    _need(m["kind"] in MODEL_KINDS, f"model.kind must be one of {MODEL_KINDS}")
    _need(isinstance(d["n"], int) and d["n"] >= 2, "demand.n must be an integer >= 2")
    _need(0.0 < float(d["split_ratio"]) < 1.0, "demand.split_ratio must lie in (0, 1)")
    _need(isinstance(cfg["sample"]["n"], int) and cfg["sample"]["n"] >= 1, "sample.n must be >= 1")
    _need(cfg["sample"]["max_len"] >= 2, "sample.max_len must be >= 2")
    _need(cfg["eval"]["reference"] in ("train", "test"), "eval.reference must be train or test")
    net = cfg["network"]
    _need(net["rows"] >= 2 and net["cols"] >= 2, "network needs at least 2x2 intersections")
    if m["kind"].startswith("maxent"):
        _need(cfg["granularity"] == "link", "MaxEnt models run on link granularity")
    if m["kind"] == "mmc":
        _need(cfg["granularity"] == "link", "mmc is the link-level transition model; use trn for cells")
    _need(m["trajgail"]["baseline"] in ("none", "mean", "state"), "trajgail.baseline must be none, mean or state")
    if m["kind"] == "trn":
        _need(cfg["granularity"] == "cell", "trn is the cell-level transition model; use mmc for links")
    try:
        dg.RouteChoiceModel(**d["route_choice"])
        GailConfig(**m["trajgail"])
        RecurrentCellConfig(m["rnn"]["cell"], 1, 1, 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def env_seed():
    raw = os.environ.get("TRAJLAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"TRAJLAB_SEED must be an integer, got {raw!r}") from None


def resolve_config(file_cfg=None, flags=None, seed=None):
    """defaults < flags < config file; then ``seed`` (from --seed) wins."""
    cfg = deep_merge(DEFAULTS, flags or {})
    cfg = deep_merge(cfg, file_cfg or {})
    _check_keys(cfg, DEFAULTS, "")
    if seed is not None:
        cfg["seed"] = int(seed)
        for sec in ("demand", "model", "sample"):
            cfg[sec]["seed"] = None
    if cfg["seed"] is None:
        cfg["seed"] = env_seed()
    cfg["demand"]["seed"] = cfg["seed"] if cfg["demand"]["seed"] is None else cfg["demand"]["seed"]
    cfg["model"]["seed"] = cfg["seed"] if cfg["model"]["seed"] is None else cfg["model"]["seed"]
    if cfg["sample"]["seed"] is None:
        cfg["sample"]["seed"] = cfg["seed"] + 1
    if cfg["workers"] is None:
        cfg["workers"] = default_workers()
    return validate_config(cfg)


def load_config_file(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def persisted(cfg):
    """Config as written to disk; ``workers`` never changes results, so it is dropped."""
    out = copy.deepcopy(cfg)
    out.pop("workers", None)
    return out


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- stage helpers ----------------------------------------------------------------------
def build_network(cfg):
    n = cfg["network"]
    return rn.build_grid(n["rows"], n["cols"], n["block_length_m"])


def build_demand(net, cfg, workers=1):
    d = cfg["demand"]
    kw = {} if d["pattern"] == "SingleOD" else {"major_weight": d["major_weight"],
                                               "background_weight": d["background_weight"]}
    pattern = dg.make_pattern(net, d["pattern"], **kw)
    choice = dg.RouteChoiceModel(**d["route_choice"])
    return dg.generate_dataset(net, pattern, choice, d["n"], d["seed"], d["depart_horizon_min"],
                               d["link_travel_min"], workers)


def _cell(mcfg):
    r = mcfg["rnn"]
    return RecurrentCellConfig(r["cell"], r["hidden"], r["hidden"], r["layers"])


def make_env_for(cfg, net, n_cells=None):
    if cfg["granularity"] == "cell":
        return CellEnv(n_cells, net.hash())
    return LinkEnv(net)


def traffic_contexts(full, part_ds, n_loc, cfg):
    """Accumulation before each departure in ``part_ds``, built from ``full``."""
    occ = dg.Occupancy(full, n_loc, cfg["demand"]["link_travel_min"])
    return dg.accumulation_batch(part_ds, n_loc, occupancy=occ)


def train_model(cfg, env, train, contexts=None, log_path=None):
    m = cfg["model"]
    kind, seed = m["kind"], m["seed"]
    if kind in ("mmc", "trn"):
        return fit_transition(train, env)
    if kind.startswith("maxent"):
        me = m["maxent"]
        return maxent_train(train, env, kind.split("_")[1].upper(), me["iters"], me["lr"], me["tol"],
                            me["horizon"])
    r = m["rnn"]
    if kind == "rnn":
        return rnn_train(train, env, r["epochs"], r["lr"], _cell(m), seed, r["batch_size"])
    if kind == "arnn":
        return arnn_train(train, env, contexts, r["epochs"], r["lr"], _cell(m), seed, r["batch_size"],
                          r["attn_size"])
    gcfg = GailConfig(**dict(m["trajgail"], seed=seed))
    return gail_train(train, env, gcfg, log_path=log_path)


def evaluate(cfg, model, generated, train, test, test_contexts=None):
    e = cfg["eval"]
    reference = train if e["reference"] == "train" else test
    row = ev.score_model(generated, test, reference, e["n_score"])
    rep = ev.EvalReport(metadata={"n_train": len(train), "n_test": len(test),
                                  "n_generated": len(generated), "seed": cfg["seed"],
                                  "real_entropy": ev.transition_entropy(test)})
    curves = {}
    if model is not None and e["cpp_k"]:
        for k in e["cpp_k"]:
            curve, area, _ = ev.cpp_k(model, test, k, e["cpp_g"], test_contexts)
            curves[k] = curve
            row[f"auc_k{k}"] = area
    name = cfg["model"]["kind"]
    rep.rows[name] = row
    if curves:
        rep.ccdf[name] = curves
    return rep


# -- pipeline -----------------------------------------------------------------------------
class _Manifest:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.data = {"status": "RUNNING", "artifacts": {}, "sizes": {}}

    def add(self, name, path):
        p = Path(path)
        self.data["artifacts"][name] = {"path": p.name, "sha256": sha256(p), "bytes": p.stat().st_size}

    def write(self):
        write_json(self.dir / "manifest.json", self.data)


def run_pipeline(cfg):
    """net -> demand -> split -> (tessellate) -> train -> sample -> eval.

    Returns the manifest dict. On failure the manifest is still written,
    with status ``FAILED`` and the failing stage, and the error re-raised.
    """
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    man = _Manifest(out)
    workers = cfg["workers"]
    stage = "config"
    try:
        write_json(out / "config.json", persisted(cfg))
        man.add("config", out / "config.json")
        stage = "net"
        net = build_network(cfg)
        rn.save(net, out / "network.json")
        man.add("network", out / "network.json")
        stage = "demand"
        expert = build_demand(net, cfg, workers)
        expert.save(out / "expert.jsonl")
        man.add("expert", out / "expert.jsonl")
        stage = "split"
        train, test = dg.split_train_test(expert, cfg["demand"]["split_ratio"], cfg["demand"]["seed"])
        man.data["sizes"].update(n=len(expert), train=len(train), test=len(test))
        n_cells = None
        if cfg["granularity"] == "cell":
            stage = "tessellate"
            part = tz.partition_network(net, cfg["tessellation"]["radius_m"])
            part.save(out / "partition.json")
            man.add("partition", out / "partition.json")
            train = tz.dataset_to_cells(train, net, part)
            test = tz.dataset_to_cells(test, net, part)
            n_cells = part.n_cells
        for name, ds in (("train", train), ("test", test)):
            ds.save(out / f"{name}.jsonl")
            man.add(name, out / f"{name}.jsonl")
        env = make_env_for(cfg, net, n_cells)
        stage = "train"
        train_ctx = test_ctx = None
        if cfg["model"]["kind"] == "arnn":
            full = TrajectoryDataset(list(train) + list(test))
            train_ctx = traffic_contexts(full, train, env.n_loc, cfg)
            test_ctx = traffic_contexts(full, test, env.n_loc, cfg)
        log_path = out / "train_log.csv" if cfg["model"]["kind"] == "trajgail" else None
        model = train_model(cfg, env, train, train_ctx, log_path)
        save_model(model, out / "model.tlab")
        man.add("model", out / "model.tlab")
        man.add("model_manifest", out / "model.tlab.json")
        if log_path:
            man.add("train_log", log_path)
        stage = "sample"
        s = cfg["sample"]
        gen = rollout_sample(model, s["n"], s["max_len"], s["seed"], workers, test_ctx)
        gen.save(out / "generated.jsonl")
        man.add("generated", out / "generated.jsonl")
        man.data["sizes"]["generated"] = len(gen)
        man.data["sizes"]["incomplete"] = sum(not t.complete for t in gen)
        stage = "eval"
        rep = evaluate(cfg, model, gen, train, test, test_ctx)
        rep.save(out / "report")
        for f in sorted(out.glob("report*")):
            man.add(f.name, f)
        man.data["status"] = "OK"
    except Exception as exc:
        man.data.update(status="FAILED", stage=stage, error=f"{type(exc).__name__}: {exc}")
        raise
    finally:
        man.write()
    return man.data


# -- argument parsing ---------------------------------------------------------------------
def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config seeds)")
    p.add_argument("--workers", type=int, default=None, help="worker processes for rollouts")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="trajlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("net", help="build a grid road network")
    _common(p)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--block-length", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("demand", help="generate expert trajectories")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--pattern", choices=PATTERNS)
    p.add_argument("--route-choice")
    p.add_argument("--n", type=int)
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--out", required=True, help="JSONL path; train/test splits go beside it")

    p = sub.add_parser("tessellate", help="partition a network into cells")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--data", help="link dataset to convert to cell sequences")
    p.add_argument("--out", required=True, help="partition JSON")
    p.add_argument("--cells-out", help="cell-sequence JSONL")

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--granularity", choices=("link", "cell"))
    p.add_argument("--partition", help="partition JSON for cell-level data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", required=True, help="model file (TLAB); manifest goes to <out>.json")

    p = sub.add_parser("sample", help="generate trajectories from a model file")
    _common(p)
    p.add_argument("--model-file", required=True)
    p.add_argument("--net", help="network JSON (link-level models)")
    p.add_argument("--n", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--contexts", help=".npy traffic states for attention models")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score one generated set")
    _common(p)
    p.add_argument("--real", required=True, help="real (test) dataset")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", help="BLEU/METEOR reference set (default: --real)")
    p.add_argument("--model-file", help="also compute CPP tables with this model")
    p.add_argument("--net")
    p.add_argument("--name", default="model")
    p.add_argument("--out", required=True, help="report stem")

    p = sub.add_parser("run", help="full pipeline from a config")
    _common(p)
    p.add_argument("--out-dir")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--granularity", choices=("link", "cell"))

    p = sub.add_parser("report", help="consolidated comparison of generated sets")
    _common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--generated", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--reference")
    p.add_argument("--out", required=True, help="report stem")
    return ap


def flags_to_config(args):
    """Translate explicitly given flags into a partial config."""
    f = {}

    def put(path, value):
        if value is None:
            return
        d = f
        for k in path[:-1]:
            d = d.setdefault(k, {})
        d[path[-1]] = value

    g = vars(args)
    put(("workers",), g.get("workers"))
    put(("granularity",), g.get("granularity"))
    put(("network", "rows"), g.get("rows"))
    put(("network", "cols"), g.get("cols"))
    put(("network", "block_length_m"), g.get("block_length"))
    put(("demand", "pattern"), g.get("pattern"))
    put(("demand", "route_choice", "kind"), g.get("route_choice"))
    put(("demand", "split_ratio"), g.get("split_ratio"))
    put(("tessellation", "radius_m"), g.get("radius"))
    put(("model", "kind"), g.get("model"))
    put(("out_dir",), g.get("out_dir"))
    if args.command == "demand":
        put(("demand", "n"), g.get("n"))
    if args.command == "sample":
        put(("sample", "n"), g.get("n"))
        put(("sample", "max_len"), g.get("max_len"))
    if args.command == "train":
        for key in ("epochs", "lr"):
            put(("model", "rnn", key), g.get(key))
        put(("model", "maxent", "iters"), g.get("iters"))
        put(("model", "trajgail", "iters"), g.get("iters"))
        put(("model", "trajgail", "lr"), g.get("lr"))
        if g.get("lr") is not None:
            put(("model", "maxent", "lr"), g["lr"])
    return f


def _load_ds(path):
    path = str(path)
    try:
        return TrajectoryDataset.load(path)
    except (KeyError, TypeError):
        return tz.load_cell_sequences(path)


def _cmd_net(cfg, args):
    net = build_network(cfg)
    rn.save(net, args.out)
    write_json(args.out + ".config.json", persisted(cfg))


def _cmd_demand(cfg, args):
    net = rn.load(args.net)
    ds = build_demand(net, cfg, cfg["workers"])
    ds.save(args.out)
    train, test = dg.split_train_test(ds, cfg["demand"]["split_ratio"], cfg["demand"]["seed"])
    stem = args.out[:-6] if args.out.endswith(".jsonl") else args.out
    train.save(stem + ".train.jsonl")
    test.save(stem + ".test.jsonl")
    write_json(stem + ".config.json", persisted(cfg))


def _cmd_tessellate(cfg, args):
    net = rn.load(args.net)
    part = tz.partition_network(net, cfg["tessellation"]["radius_m"])
    part.save(args.out)
    if args.data:
        if not args.cells_out:
            raise ConfigError("--data needs --cells-out")
        tz.dataset_to_cells(_load_ds(args.data), net, part).save(args.cells_out)
    write_json(args.out + ".config.json", persisted(cfg))


def _cmd_train(cfg, args):
    net = rn.load(args.net)
    ds = _load_ds(args.data)
    n_cells = None
    if cfg["granularity"] == "cell":
        if not args.partition:
            raise ConfigError("cell-level training needs --partition")
        n_cells = tz.CellPartition.load(args.partition).n_cells
    env = make_env_for(cfg, net, n_cells)
    ctx = None
    if cfg["model"]["kind"] == "arnn":
        ctx = traffic_contexts(ds, ds, env.n_loc, cfg)
        np.save(args.out + ".contexts.npy", ctx)
    log_path = args.out + ".log.csv" if cfg["model"]["kind"] == "trajgail" else None
    model = train_model(cfg, env, ds, ctx, log_path)
    save_model(model, args.out)
    write_json(args.out + ".config.json", persisted(cfg))


def _cmd_sample(cfg, args):
    net = rn.load(args.net) if args.net else None
    model = load_model(args.model_file, net)
    ctx = np.load(args.contexts) if args.contexts else None
    s = cfg["sample"]
    gen = rollout_sample(model, s["n"], s["max_len"], s["seed"], cfg["workers"], ctx)
    gen.save(args.out)
    write_json(args.out + ".config.json", persisted(cfg))


def _cmd_eval(cfg, args):
    real = _load_ds(args.real)
    gen = _load_ds(args.generated)
    ref = _load_ds(args.reference) if args.reference else real
    row = ev.score_model(gen, real, ref, cfg["eval"]["n_score"])
    rep = ev.EvalReport(metadata={"n_real": len(real), "n_generated": len(gen),
                                  "real_entropy": ev.transition_entropy(real), "seed": cfg["seed"]})
    if args.model_file:
        net = rn.load(args.net) if args.net else None
        model = load_model(args.model_file, net)
        curves = {}
        for k in cfg["eval"]["cpp_k"]:
            curves[k], row[f"auc_k{k}"], _ = ev.cpp_k(model, real, k, cfg["eval"]["cpp_g"])
        rep.ccdf[args.name] = curves
    rep.rows[args.name] = row
    rep.save(args.out)


def _cmd_report(cfg, args):
    real = _load_ds(args.real)
    ref = _load_ds(args.reference) if args.reference else None
    sets = {}
    for item in args.generated:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--generated expects NAME=PATH, got {item!r}")
        sets[name] = _load_ds(path)
    ev.compare_models(real, sets, ref, cfg["eval"]["n_score"]).save(args.out)


def _cmd_run(cfg, args):
    man = run_pipeline(cfg)
    log.info("run finished: %s", json.dumps(man["sizes"], sort_keys=True))


COMMANDS = {"net": _cmd_net, "demand": _cmd_demand, "tessellate": _cmd_tessellate, "train": _cmd_train,
            "sample": _cmd_sample, "eval": _cmd_eval, "run": _cmd_run, "report": _cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "run" else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = resolve_config(file_cfg, flags_to_config(args), args.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDivergence, FloatingPointError) as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (ev.EvaluationError, SamplingError) as exc:
        log.error("evaluation error: %s", exc)
        return EXIT_EVAL
    except (dg.DemandError, tz.TessellationError, rn.NetworkError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
