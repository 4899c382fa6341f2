"""TrajGAIL: recurrent policy, value estimator and discriminator trained
adversarially against expert trajectories.

``D(s, a)`` is the probability that a (prefix, action) pair was produced by
the generator; the generator's reward is ``-log D``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .. import ndcore as nd
from ..ndcore import tensor as T
from .env import encode
from .policy import RecurrentHead, SequencePolicy, TrainingDivergence, fit_sequence
from .sampling import rollout

log = logging.getLogger(__name__)

D_CLAMP = 1e-8
LOG_FIELDS = ("iter", "J_policy", "J_value", "J_discrim", "entropy", "unique_routes")


@dataclass
class GailConfig:
    iters: int = 20_000
    n_samples: int = 20_000
    d_updates: int = 2
    g_updates: int = 6
    hidden: int = 64
    layers: int = 3
    cell: str = "LSTM"
    lr: float = 5e-5
    gamma: float = 0.95
    lam: float = 0.01
    max_len: int = 40
    baseline: str = "none"
    bc_epochs: int = 0
    bc_lr: float = 5e-3
    clip: float = 10.0
    collapse_window: int = 200
    seed: int = 0

    def cell_config(self):
        return nd.RecurrentCellConfig(self.cell, self.hidden, self.hidden, self.layers)


@dataclass
class Batch:
    """Padded state-action pairs; ``term`` marks each sequence's last step."""
    obs: np.ndarray
    act: np.ndarray
    w: np.ndarray
    term: np.ndarray

    @property
    def n_pairs(self):
        return float(self.w.sum())


def make_batch(env, ds):
    """Encode trajectories; truncated rollouts end on their last location."""
    obs, act, w = encode_partial(env, ds)
    lengths = w.sum(axis=1).astype(int)
    term = np.zeros_like(w)
    term[np.arange(len(lengths)), lengths - 1] = 1.0
    return Batch(obs, act, w, term)


def encode_partial(env, ds):
    complete = [t for t in ds if t.complete]
    if len(complete) == len(ds):
        return encode(env, ds)
    seqs = [list(t.links) for t in ds]
    Tn = max(len(s) for s in seqs) + 1
    B = len(seqs)
    obs = np.full((B, Tn), env.start, dtype=np.int64)
    act = np.full((B, Tn), int(np.argmax(env.mask[env.start])), dtype=np.int64)
    w = np.zeros((B, Tn))
    for b, t in enumerate(ds):
        toks = [env.start] + list(t.links) + ([env.end] if t.complete else [])
        for k in range(len(toks) - 1):
            obs[b, k] = toks[k]
            act[b, k] = env.action_between(toks[k], toks[k + 1])
            w[b, k] = 1.0
    return obs, act, w


class TrajGailBundle:
    def __init__(self, env, config: GailConfig):
        self.env = env
        self.config = config
        self.kind = "trajgail"
        self.params = nd.ParameterSet()
        cell = config.cell_config()
        rng = np.random.default_rng([config.seed, 7])
        self.policy = SequencePolicy(env, cell, config.seed, params=self.params, prefix="pol.")
        self.value = RecurrentHead(self.params, "val.", env, cell, rng)
        self.discrim = RecurrentHead(self.params, "dis.", env, cell, rng)
        # separate optimizer states; the three modules share no tensors
        self.opt = {k: self.params.subset(k + ".") for k in ("pol", "val", "dis")}
        self.log = []
        self.warnings = []

    def sampler(self):
        return self.policy.sampler()

    # -- forward pieces ------------------------------------------------------
    def d_logits(self, batch):
        """Logit of D(s, a) per step, time-major [T*B]."""
        return T.pick(self.discrim.outputs(batch.obs), batch.act.T.ravel())

    def d_prob(self, batch):
        with T.no_grad():
            x = self.d_logits(batch).data
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def rewards(self, batch):
        """-log D with D clamped to [1e-8, 1 - 1e-8], time-major [T*B]."""
        return -np.log(np.clip(self.d_prob(batch), D_CLAMP, 1.0 - D_CLAMP))


def reward_from_discriminator(d):
    d = np.clip(np.asarray(d, dtype=np.float64), D_CLAMP, 1.0 - D_CLAMP)
    return -np.log(d)


def _wmean(x, w):
    return T.mul(T.tsum(T.mul(x, w)), 1.0 / w.sum())


def discriminator_loss(bundle, real, gen):
    """BCE with generated pairs labelled 1 and expert pairs labelled 0."""
    xg = bundle.d_logits(gen)
    xr = bundle.d_logits(real)
    return T.add(_wmean(T.softplus(T.mul(xg, -1.0)), gen.w.T.ravel()),
                 _wmean(T.softplus(xr), real.w.T.ravel()))


def gail_discriminator_update(bundle, real, gen, post=True):
    loss = discriminator_loss(bundle, real, gen)
    _finite(loss.item(), "J_discrim")
    loss.backward()
    _step(bundle, "dis")
    if not post:
        return loss.item()
    with T.no_grad():
        return discriminator_loss(bundle, real, gen).item()


def _next_expectation(bundle, batch, q_all, lp=None):
    """Σ_a π(a|s_{t+1}) Q(s_{t+1}, a), zero on terminal steps; time-major."""
    B = batch.obs.shape[0]
    Tn = batch.obs.shape[1]
    if lp is None:
        with T.no_grad():
            lp = bundle.policy.log_probs(batch.obs).data
    pi = np.exp(lp)
    mask = bundle.env.mask[batch.obs.T.ravel()]
    ev = np.where(mask, pi * q_all, 0.0).sum(axis=1).reshape(Tn, B)
    nxt = np.zeros_like(ev)
    nxt[:-1] = ev[1:]
    return nxt.ravel() * (1.0 - batch.term.T.ravel())


def value_targets(bundle, batch, rewards, policy_lp=None, q_all=None):
    """Bootstrap targets R + γ Σ_a π(a|s') Q(s', a), R alone on terminal steps."""
    if q_all is None:
        with T.no_grad():
            q_all = bundle.value.outputs(batch.obs).data
    return rewards + bundle.config.gamma * _next_expectation(bundle, batch, q_all, policy_lp)


def value_loss(bundle, batch, rewards, policy_lp=None, target=None):
    """Semi-gradient TD loss; ``policy_lp`` may supply the policy's log-probs
    and ``target`` fixed bootstrap targets."""
    q_all = bundle.value.outputs(batch.obs)
    q_sa = T.pick(q_all, batch.act.T.ravel())
    if target is None:
        target = value_targets(bundle, batch, rewards, policy_lp, q_all.data)
    diff = T.sub(q_sa, target)
    return _wmean(T.square(diff), batch.w.T.ravel())


def gail_value_update(bundle, batch, rewards, policy_lp=None):
    loss = value_loss(bundle, batch, rewards, policy_lp)
    _finite(loss.item(), "J_value")
    loss.backward()
    _step(bundle, "val")
    return loss.item()


def q_values(bundle, batch, lp=None):
    """Policy-gradient coefficients: Q(s, a), optionally minus a baseline.

    ``baseline`` is "none", "mean" (batch mean of Q) or "state"
    (Σ_a π(a|s) Q(s, a)); neither baseline changes the expected gradient.
    """
    with T.no_grad():
        q_all = bundle.value.outputs(batch.obs).data
    act = batch.act.T.ravel()
    q = q_all[np.arange(len(act)), act]
    kind = bundle.config.baseline
    if kind == "mean":
        w = batch.w.T.ravel()
        q = q - (q * w).sum() / w.sum()
    elif kind == "state":
        if lp is None:
            with T.no_grad():
                lp = bundle.policy.log_probs(batch.obs).data
        mask = bundle.env.mask[batch.obs.T.ravel()]
        q = q - np.where(mask, np.exp(lp) * q_all, 0.0).sum(axis=1)
    elif kind != "none":
        raise ValueError(f"unknown baseline {kind!r}")
    return q


def policy_objective(bundle, batch, q, lp=None):
    """(surrogate to maximise, mean entropy) with Q held constant."""
    lp = bundle.policy.log_probs(batch.obs) if lp is None else lp
    mask = bundle.env.mask[batch.obs.T.ravel()].astype(np.float64)
    lp_a = T.pick(lp, batch.act.T.ravel())
    ent = T.mul(T.tsum(T.mul(T.exp(lp), T.mul(lp, mask)), axis=1), -1.0)
    w = batch.w.T.ravel()
    pg = _wmean(T.mul(lp_a, q), w)
    H = _wmean(ent, w)
    return T.add(pg, T.mul(H, bundle.config.lam)), H


def gail_policy_update(bundle, batch, q=None, lp=None):
    if q is None:
        q = q_values(bundle, batch, None if lp is None else lp.data)
    obj, H = policy_objective(bundle, batch, q, lp)
    _finite(obj.item(), "J_policy")
    T.mul(obj, -1.0).backward()
    _step(bundle, "pol")
    return obj.item(), H.item()


def _finite(v, what):
    if not math.isfinite(v):
        raise TrainingDivergence(f"{what} is {v}")


def _step(bundle, which):
    ps = bundle.opt[which]
    for _, t in ps.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    nd.adam_step(ps, bundle.config.lr, clip=bundle.config.clip)


def _sample_real(rng, real_batch, n):
    idx = rng.integers(0, real_batch.obs.shape[0], n)
    return Batch(real_batch.obs[idx], real_batch.act[idx], real_batch.w[idx], real_batch.term[idx])


def _trim(batch):
    Tn = int(batch.w.sum(axis=1).max())
    return Batch(batch.obs[:, :Tn], batch.act[:, :Tn], batch.w[:, :Tn], batch.term[:, :Tn])


def gail_train(ds, env, config: GailConfig | None = None, log_path=None, callback=None):
    """Adversarial training loop; returns the bundle with its per-iteration log."""
    cfg = config or GailConfig()
    bundle = TrajGailBundle(env, cfg)
    real_all = make_batch(env, ds)
    if cfg.bc_epochs:
        # optional behaviour-cloning warm start with its own optimizer state
        obs, act, w = encode(env, ds)
        fit_sequence(bundle.policy, obs, act, w, cfg.bc_epochs, cfg.bc_lr, seed=cfg.seed,
                     opt_params=bundle.params.subset("pol."))
    multi_route = len(ds.route_counts()) > 1
    rng = np.random.default_rng([cfg.seed, 11])
    single_streak = 0
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_FIELDS)
    try:
        for it in range(cfg.iters):
            gen_ds = rollout(bundle.sampler(), env, cfg.n_samples, cfg.max_len,
                             seed=cfg.seed * 1_000_003 + it)
            gen = _trim(make_batch(env, gen_ds))
            real = _trim(_sample_real(rng, real_all, cfg.n_samples))
            for k in range(cfg.d_updates):
                jd = gail_discriminator_update(bundle, real, gen, post=(k == cfg.d_updates - 1))
            rew = bundle.rewards(gen)
            for _ in range(cfg.g_updates):
                # one policy forward serves the value target and the policy step
                lp = bundle.policy.log_probs(gen.obs)
                jv = gail_value_update(bundle, gen, rew, lp.data)
                jp, ent = gail_policy_update(bundle, gen, lp=lp)
            uniq = len(gen_ds.route_counts())
            row = (it, jp, jv, jd, ent, uniq)
            bundle.log.append(row)
            if writer:
                writer.writerow(row)
            single_streak = single_streak + 1 if uniq == 1 else 0
            if multi_route and single_streak == cfg.collapse_window:
                msg = f"mode collapse: one generated route for {cfg.collapse_window} iterations (iter {it})"
                log.warning(msg)
                bundle.warnings.append(msg)
            if callback:
                callback(bundle, row)
    finally:
        if fh:
            fh.close()
    return bundle
