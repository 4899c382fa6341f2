"""First-order transition-matrix baselines (TRN for cells, MMC for links)."""
from __future__ import annotations

import numpy as np


class TransitionMatrix:
    """Maximum-likelihood next-observation probabilities.

    Rows are observations (locations and Start), columns are observations
    (locations and End). Rows never seen in the data are flagged in
    ``absorbing`` and send all mass to End.
    """

    def __init__(self, env, counts):
        self.env = env
        self.kind = "mmc" if env.granularity == "link" else "trn"
        self.counts = np.asarray(counts, dtype=np.float64)
        tot = self.counts.sum(axis=1, keepdims=True)
        self.absorbing = tot[:, 0] == 0
        self.probs = np.divide(self.counts, tot, out=np.zeros_like(self.counts), where=tot > 0)
        self.probs[self.absorbing, env.end] = 1.0
        self.probs[env.end] = 0.0
        self.absorbing[env.end] = False
        # per-action view used by the sampler
        nxt = env.nxt
        self.action_probs = np.where(env.mask, self.probs[np.arange(env.n_obs)[:, None],
                                                         np.maximum(nxt, 0)], 0.0)

    # sampler protocol
    def initial_state(self, batch, context=None):
        return None

    def step(self, state, obs):
        return state, self.action_probs[obs]

    def sampler(self):
        return self


def fit_transition(ds, env):
    """Count Start->first, consecutive and last->End transitions."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    counts = np.zeros((env.n_obs, env.n_obs))
    for t in ds:
        toks = [env.start] + list(t.links) + ([env.end] if t.complete else [])
        np.add.at(counts, (toks[:-1], toks[1:]), 1.0)
    return TransitionMatrix(env, counts)
