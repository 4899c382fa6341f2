"""Action spaces shared by every model.

Both environments expose dense tables over observations: ``mask[o]``
(allowed actions) and ``nxt[o]`` (successor observation, -1 if masked).
Observations are locations ``0..N-1`` then ``Start`` and ``End``.
"""
from __future__ import annotations

import numpy as np

from .. import roadnet as rn


class LinkEnv:
    """Four turn actions plus one origin action per entry link.

    Origin actions are valid only at ``Start``; turn actions follow the
    network's next-observation table.
    """

    granularity = "link"

    def __init__(self, net):
        self.net = net
        self.n_loc = net.n_links
        self.start = net.start
        self.end = net.end
        self.n_obs = net.n_obs
        E = len(net.entry_links)
        self.n_actions = rn.N_ACTIONS + E
        self.nxt = np.full((self.n_obs, self.n_actions), -1, dtype=np.int64)
        self.nxt[:net.n_links, :rn.N_ACTIONS] = net.next_obs
        self.nxt[self.start, rn.N_ACTIONS:] = net.entry_links
        self.mask = self.nxt >= 0
        self.net_hash = net.hash()

    def action_between(self, o, o2):
        hits = np.nonzero(self.nxt[o] == o2)[0]
        return int(hits[0]) if hits.size else -1

    def is_terminal_action(self, a):
        return a == rn.TERMINATE


class CellEnv:
    """One action per cell plus ``End``; the current cell is masked."""

    granularity = "cell"

    def __init__(self, n_cells, net_hash=""):
        N = int(n_cells)
        self.n_loc = N
        self.start = N
        self.end = N + 1
        self.n_obs = N + 2
        self.n_actions = N + 1
        self.nxt = np.full((self.n_obs, self.n_actions), -1, dtype=np.int64)
        cells = np.arange(N)
        self.nxt[:N, :N] = cells[None, :]
        self.nxt[cells, cells] = -1
        self.nxt[:N, N] = self.end
        self.nxt[self.start, :N] = cells
        self.mask = self.nxt >= 0
        self.net_hash = net_hash

    def action_between(self, o, o2):
        if o2 == self.end:
            return self.n_loc if o != self.start else -1
        if o2 == o or not 0 <= o2 < self.n_loc:
            return -1
        return int(o2)

    def is_terminal_action(self, a):
        return a == self.n_loc


def make_env(net=None, n_cells=None):
    if n_cells is not None:
        return CellEnv(n_cells, net.hash() if net is not None else "")
    return LinkEnv(net)


class InvalidTrajectory(ValueError):
    pass


def encode(env, ds):
    """Padded teacher-forcing arrays for a dataset.

    Returns ``obs`` [B, T] (Start, l_1..l_m, padding), ``act`` [B, T]
    (action leading to the next token, End included) and ``w`` [B, T]
    with 1 on real steps. Padding repeats Start with a valid action.
    """
    seqs = [list(t.links) for t in ds]
    T = max(len(s) for s in seqs) + 1
    B = len(seqs)
    obs = np.full((B, T), env.start, dtype=np.int64)
    act = np.full((B, T), int(np.argmax(env.mask[env.start])), dtype=np.int64)
    w = np.zeros((B, T))
    for b, s in enumerate(seqs):
        toks = [env.start] + s + [env.end]
        for t in range(len(toks) - 1):
            a = env.action_between(toks[t], toks[t + 1])
            if a < 0:
                raise InvalidTrajectory(f"trajectory {b}: no action from {toks[t]} to {toks[t + 1]}")
            obs[b, t] = toks[t]
            act[b, t] = a
            w[b, t] = 1.0
    return obs, act, w
