"""Model files: a TLAB parameter container plus a JSON manifest.

The manifest sits next to the container as ``<path>.json`` and holds
``{model_kind, granularity, config, seed, net_hash}``.
"""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .. import ndcore as nd
from .env import CellEnv, LinkEnv
from .gail import GailConfig, TrajGailBundle
from .maxent import MaxEntModel
from .policy import AttentionConfig, SequencePolicy
from .transition import TransitionMatrix


class ModelFileError(ValueError):
    pass


def _env_config(env):
    return {"n_cells": env.n_loc} if env.granularity == "cell" else {}


def _parts(model):
    """(kind, parameters, config, seed) for any supported model."""
    if isinstance(model, TransitionMatrix):
        ps = nd.ParameterSet()
        ps.add("counts", model.counts)
        return model.kind, ps, {}, None
    if isinstance(model, MaxEntModel):
        ps = nd.ParameterSet()
        ps.add("w", model.w)
        ps.add("origin_probs", model.origin_probs)
        return model.kind, ps, {"mode": model.mode, "horizon": model.horizon}, None
    if isinstance(model, TrajGailBundle):
        return model.kind, model.params, asdict(model.config), model.config.seed
    if isinstance(model, SequencePolicy):
        return model.kind, model.params, model.config(), model.seed
    raise ModelFileError(f"cannot save {type(model).__name__}")


def manifest(model):
    kind, _, config, seed = _parts(model)
    config = dict(config, **_env_config(model.env))
    return {"model_kind": kind, "granularity": model.env.granularity, "config": config,
            "seed": seed, "net_hash": model.env.net_hash}


def save_model(model, path):
    """Write ``path`` (TLAB) and ``path.json``; returns both paths."""
    path = str(path)
    _, params, _, _ = _parts(model)
    nd.save(params, path)
    with open(path + ".json", "w") as fh:
        json.dump(manifest(model), fh, indent=1, sort_keys=True)
    return path, path + ".json"


def _copy_into(target, loaded):
    if sorted(target.names()) != sorted(loaded.names()):
        raise ModelFileError("parameter names do not match the manifest's architecture")
    for name, t in loaded.items():
        if target[name].data.shape != t.data.shape:
            raise ModelFileError(f"shape mismatch for {name}")
        target[name].data = t.data.copy()


def load_model(path, net=None):
    """Rebuild a saved model; ``net`` is required for link-level models."""
    path = str(path)
    with open(path + ".json") as fh:
        man = json.load(fh)
    params = nd.load(path)
    cfg = man["config"]
    if man["granularity"] == "cell":
        env = CellEnv(cfg["n_cells"], man["net_hash"])
    else:
        if net is None:
            raise ModelFileError("link-level model needs its road network")
        if net.hash() != man["net_hash"]:
            raise ModelFileError("network hash mismatch")
        env = LinkEnv(net)
    kind = man["model_kind"]
    if kind in ("mmc", "trn"):
        return TransitionMatrix(env, params["counts"].data)
    if kind.startswith("maxent_"):
        return MaxEntModel(env, cfg["mode"], params["w"].data, cfg["horizon"],
                           params["origin_probs"].data)
    if kind == "trajgail":
        gcfg = GailConfig(**{k: v for k, v in cfg.items() if k != "n_cells"})
        model = TrajGailBundle(env, gcfg)
    elif kind in ("rnn", "arnn"):
        cell = nd.RecurrentCellConfig(**cfg["cell"])
        att = AttentionConfig(**cfg["attention"]) if "attention" in cfg else None
        model = SequencePolicy(env, cell, cfg["seed"], attention=att)
    else:
        raise ModelFileError(f"unknown model kind {kind!r}")
    _copy_into(model.params, params)
    return model
