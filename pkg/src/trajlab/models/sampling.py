"""Autoregressive rollouts shared by all models.

A sampler exposes ``initial_state(batch, context)`` and
``step(state, obs) -> (state, probs)`` where ``probs`` is a [B, A] array
over the environment's actions with exact zeros on masked entries.
Trajectory ``i`` consumes the uniforms of ``default_rng([seed, i])``;
chunks have a fixed size, so results do not depend on the worker count.
"""
from __future__ import annotations

import numpy as np

from ..parallel import map_chunks
from ..trajectory import Trajectory, TrajectoryDataset


class SamplingError(RuntimeError):
    pass


def draw_actions(probs, u):
    """Inverse-CDF draw per row; never lands on a zero-probability entry."""
    cdf = np.cumsum(probs, axis=1)
    total = cdf[:, -1]
    if (total <= 0).any() or not np.isfinite(total).all():
        raise SamplingError("model produced a zero-mass next-step distribution")
    a = (cdf <= (u * total)[:, None]).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


def as_sampler(model):
    return model.sampler() if hasattr(model, "sampler") else model


def run_batch(sampler, env, u, max_len, ctx=None, prefixes=None, strict=True):
    """Sample one batch; row ``b`` uses uniforms ``u[b]``.

    ``prefixes`` optionally forces each row's first locations. Returns
    (paths, complete, failed); with ``strict=False`` a zero-mass step marks
    the row failed instead of raising.
    """
    B = u.shape[0]
    prefixes = prefixes or [()] * B
    state = sampler.initial_state(B, ctx)
    obs = np.full(B, env.start, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    paths = [list(p) for p in prefixes]
    plen = np.array([len(p) for p in prefixes])
    for t in range(max_len + 1):
        feed = np.where(alive, obs, env.start)
        state, probs = sampler.step(state, feed)
        forced = alive & (t < plen)
        for r in np.nonzero(forced)[0]:
            obs[r] = prefixes[r][t]
        rows = np.nonzero(alive & ~forced)[0]
        if rows.size:
            p = probs[rows]
            dead = p.sum(axis=1) <= 0
            if dead.any():
                if strict:
                    raise SamplingError("model produced a zero-mass next-step distribution")
                failed[rows[dead]] = True
                alive[rows[dead]] = False
                rows, p = rows[~dead], p[~dead]
            a = draw_actions(p, u[rows, t]) if rows.size else np.zeros(0, dtype=np.int64)
            nxt = env.nxt[feed[rows], a]
            for r, o2 in zip(rows, nxt):
                if o2 == env.end:
                    alive[r] = False
                    done[r] = True
                elif t == max_len:
                    alive[r] = False
                else:
                    paths[r].append(int(o2))
            obs[rows] = nxt
        if not alive.any():
            break
    return paths, done, failed


def _uniforms(seed, start, stop, width):
    return np.stack([np.random.default_rng([seed, i]).random(width) for i in range(start, stop)])


def _rollout_chunk(start, stop, sampler, env, max_len, seed, contexts):
    u = _uniforms(seed, start, stop, max_len + 1)
    ctx = None
    if contexts is not None:
        ctx = contexts[np.arange(start, stop) % len(contexts)]
    paths, done, _ = run_batch(sampler, env, u, max_len, ctx)
    return [Trajectory(start + b, tuple(paths[b]), 0.0, bool(done[b])) for b in range(stop - start)]


def rollout(sampler, env, n, max_len, seed=0, workers=1, contexts=None):
    """Sample ``n`` trajectories of at most ``max_len`` locations."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    trajs = map_chunks(_rollout_chunk, n, (sampler, env, int(max_len), int(seed), contexts), workers)
    return TrajectoryDataset(trajs, {"seed": int(seed), "n": int(n), "max_len": int(max_len),
                                     "granularity": env.granularity, "net_hash": env.net_hash})


def rollout_sample(model, n, max_len, seed=0, workers=1, contexts=None):
    """Generate ``n`` trajectories from any trained model."""
    ds = rollout(as_sampler(model), model.env, n, max_len, seed, workers, contexts)
    ds.metadata["model_kind"] = getattr(model, "kind", type(model).__name__)
    return ds


def complete_prefixes(model, prefixes, n_each, max_len, seed=0, contexts=None):
    """``n_each`` sampled continuations per prefix.

    Returns a list (per prefix) of lists of (continuation tuple, complete,
    failed). Continuations exclude the forced prefix.
    """
    sampler = as_sampler(model)
    env = model.env
    out = []
    for i, pre in enumerate(prefixes):
        u = _uniforms(seed, i * n_each, (i + 1) * n_each, max_len + 1)
        ctx = None
        if contexts is not None:
            ctx = np.repeat(np.asarray(contexts)[i:i + 1], n_each, axis=0)
        paths, done, failed = run_batch(sampler, env, u, max_len, ctx,
                                        [tuple(pre)] * n_each, strict=False)
        out.append([(tuple(p[len(pre):]), bool(d), bool(f))
                    for p, d, f in zip(paths, done, failed)])
    return out


def step_probabilities(model, ds, contexts=None, batch_size=256):
    """Probability each model step assigns to the observed next token.

    Returns one array per trajectory of length ``len + 1`` (origin choice
    through the End step).
    """
    sampler = as_sampler(model)
    env = model.env
    out = [None] * len(ds)
    trajs = list(ds)
    for s in range(0, len(trajs), batch_size):
        chunk = trajs[s:s + batch_size]
        B = len(chunk)
        toks = [[env.start] + list(t.links) + [env.end] for t in chunk]
        Tn = max(len(x) for x in toks) - 1
        ctx = None if contexts is None else np.asarray(contexts)[s:s + B]
        state = sampler.initial_state(B, ctx)
        res = np.zeros((B, Tn))
        for t in range(Tn):
            feed = np.array([x[t] if t < len(x) - 1 else env.start for x in toks])
            state, probs = sampler.step(state, feed)
            for b, x in enumerate(toks):
                if t < len(x) - 1:
                    a = env.action_between(x[t], x[t + 1])
                    res[b, t] = probs[b, a] if a >= 0 else 0.0
        for b, x in enumerate(toks):
            out[s + b] = res[b, :len(x) - 1]
    return out
