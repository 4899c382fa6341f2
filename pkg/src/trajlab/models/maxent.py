"""Maximum-entropy IRL on links with state (SVF) or state-action (SAVF) rewards.

States are the links plus an absorbing End with a self-loop, so every
path spends exactly ``H`` steps in the horizon and a constant reward
shift cannot change the policy.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.special import logsumexp

from .. import roadnet as rn
from .policy import TrainingDivergence

log = logging.getLogger(__name__)


class MaxEntModel:
    def __init__(self, env, mode, w, horizon, origin_probs):
        if mode not in ("SVF", "SAVF"):
            raise ValueError(f"unknown MaxEnt mode {mode!r}")
        self.env = env
        self.mode = mode
        self.w = np.asarray(w, dtype=np.float64)
        self.horizon = int(horizon)
        self.origin_probs = np.asarray(origin_probs, dtype=np.float64)
        self.kind = "maxent_" + mode.lower()
        self.gaps = []
        self._tables()

    @property
    def L(self):
        return self.env.net.n_links

    def reward(self):
        """r[s, a] over links + End (row L), actions 0..3; End uses action 0."""
        L = self.L
        if self.mode == "SVF":
            return np.repeat(self.w[:, None], rn.N_ACTIONS, axis=1)
        return self.w.reshape(L + 1, rn.N_ACTIONS)

    def _tables(self):
        L, H = self.L, self.horizon
        net = self.env.net
        nxt = np.full((L + 1, rn.N_ACTIONS), -1, dtype=np.int64)
        nxt[:L] = net.next_obs
        nxt[:L][nxt[:L] == net.end] = L
        nxt[L, 0] = L
        valid = nxt >= 0
        r = self.reward()
        V = np.zeros(L + 1)
        pol = np.zeros((H, L + 1, rn.N_ACTIONS))
        for k in range(H - 1, -1, -1):
            Q = np.where(valid, r + V[np.maximum(nxt, 0)], -np.inf)
            V = logsumexp(Q, axis=1)
            pol[k] = np.where(valid, np.exp(Q - V[:, None]), 0.0)
        self.nxt_state = nxt
        self.valid = valid
        self.policy = pol              # [H, L+1, 4]

    def visitation(self):
        """Expected per-step state distributions D[k, s], k < H."""
        L, H = self.L, self.horizon
        D = np.zeros((H, L + 1))
        D[0, self.env.net.entry_links] = self.origin_probs
        for k in range(H - 1):
            flow = D[k][:, None] * self.policy[k]
            np.add.at(D[k + 1], self.nxt_state[self.valid], flow[self.valid])
        return D

    def expected_features(self):
        D = self.visitation()
        if self.mode == "SVF":
            return D.sum(axis=0)
        return (D[:, :, None] * self.policy).sum(axis=0).ravel()

    # sampler protocol
    def initial_state(self, batch, context=None):
        return np.zeros(batch, dtype=np.int64)

    def step(self, step_idx, obs):
        env = self.env
        B = len(obs)
        probs = np.zeros((B, env.n_actions))
        at_start = obs == env.start
        probs[at_start, rn.N_ACTIONS:] = self.origin_probs
        rows = np.nonzero(~at_start)[0]
        if rows.size:
            k = np.minimum(step_idx[rows] - 1, self.horizon - 1)
            probs[rows, :rn.N_ACTIONS] = self.policy[k, obs[rows]]
        return step_idx + 1, probs

    def sampler(self):
        return self


def empirical_features(ds, env, mode, horizon):
    L = env.net.n_links
    if mode == "SVF":
        f = np.zeros(L + 1)
    else:
        f = np.zeros((L + 1, rn.N_ACTIONS))
    for t in ds:
        links = list(t.links)
        if mode == "SVF":
            np.add.at(f, links, 1.0)
            f[L] += horizon - len(links)
        else:
            for a_, b_ in zip(links, links[1:] + [env.end]):
                f[a_, env.action_between(a_, b_)] += 1.0
            f[L, 0] += horizon - len(links)
    return f.ravel() / len(ds)


def maxent_train(ds, env, mode="SVF", iters=200, lr=0.1, tol=1e-3, horizon=None):
    """Feature matching by gradient ascent on the MaxEnt log-likelihood."""
    if env.granularity != "link":
        raise ValueError("MaxEnt runs on link granularity")
    if horizon is None:
        horizon = ds.max_len() + 2
    E = len(env.net.entry_links)
    origin = np.zeros(E)
    for t in ds:
        origin[env.net.entry_links.index(t.links[0])] += 1.0
    origin /= origin.sum()
    emp = empirical_features(ds, env, mode, horizon)
    model = MaxEntModel(env, mode, np.zeros_like(emp), horizon, origin)
    rising = 0
    for it in range(iters):
        grad = emp - model.expected_features()
        gap = float(np.abs(grad).max())
        if model.gaps and gap > model.gaps[-1]:
            rising += 1
            if rising >= 10:
                raise TrainingDivergence(f"MaxEnt feature gap grew 10 iterations in a row (gap {gap:.4g})")
        else:
            rising = 0
        model.gaps.append(gap)
        if gap < tol:
            break
        model.w = model.w + lr * grad
        model._tables()
    log.info("maxent %s: %d iterations, final gap %.4g", mode, len(model.gaps), model.gaps[-1])
    return model
