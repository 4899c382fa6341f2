"""Recurrent next-location models: behaviour-cloned RNN and attention RNN."""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from .. import ndcore as nd
from ..ndcore import tensor as T
from .env import encode

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    n_locations: int
    bins: int = 10
    attn_size: int = 32


class RecurrentHead:
    """Observation embedding -> stacked RNN -> one output per action.

    With ``attention`` set, the initial state is a tanh projection of the
    flattened [N x bins] traffic state and each step's input is the
    embedding concatenated with an additive-attention context over the
    per-location state rows.
    """

    def __init__(self, params, prefix, env, cell, rng, attention=None):
        self.params = params
        self.prefix = prefix
        self.env = env
        self.cell = cell
        self.attention = attention
        H = cell.hidden_size
        emb = cell.input_size
        params.add(prefix + "emb", nd.init_uniform(rng, (env.n_obs, emb), emb))
        in_size = emb + (attention.bins if attention else 0)
        rcfg = nd.RecurrentCellConfig(cell.kind, in_size, H, cell.layers)
        self.rnn = nd.StackedRNN(params, prefix + "rnn.", rcfg, rng)
        nd.add_linear(params, prefix + "out.", H, env.n_actions, rng)
        if attention:
            F = attention.n_locations * attention.bins
            A = attention.attn_size
            for layer in range(cell.layers):
                nd.add_linear(params, f"{prefix}init{layer}.", F, H, rng)
            params.add(prefix + "att.Wa", nd.init_uniform(rng, (attention.bins, A), A))
            params.add(prefix + "att.Ua", nd.init_uniform(rng, (H, A), A))
            params.add(prefix + "att.ba", np.zeros(A))
            params.add(prefix + "att.v", nd.init_uniform(rng, (A, 1), A))

    # -- recurrent interface ----------------------------------------------
    def initial_state(self, batch, context=None):
        if self.attention is None:
            return {"rnn": self.rnn.zero_state(batch)}
        if context is None:
            raise ValueError("attention model needs a traffic state")
        acc = np.asarray(context, dtype=np.float64)
        B, N, K = acc.shape
        flat = T.Tensor(acc.reshape(B, N * K))
        hidden = [T.tanh(nd.linear(flat, self.params, f"{self.prefix}init{l}."))
                  for l in range(self.cell.layers)]
        keys = T.reshape(T.matmul(T.Tensor(acc.reshape(B * N, K)), self.params[self.prefix + "att.Wa"]),
                         (B, N, -1))
        return {"rnn": self.rnn.state_from_hidden(hidden), "acc": acc, "keys": keys,
                "h": hidden[-1]}

    def attend(self, state):
        """Context vector and attention weights for the next step."""
        p = self.prefix
        acc, keys, h = state["acc"], state["keys"], state["h"]
        B, N, K = acc.shape
        q = T.reshape(T.add(T.matmul(h, self.params[p + "att.Ua"]), self.params[p + "att.ba"]),
                      (B, 1, -1))
        e = T.tanh(T.add(keys, q))
        score = T.reshape(T.matmul(T.reshape(e, (B * N, -1)), self.params[p + "att.v"]), (B, N))
        alpha = T.softmax(score)
        ctx = T.tsum(T.mul(T.reshape(alpha, (B, N, 1)), T.Tensor(acc)), axis=1)
        return ctx, alpha

    def step_hidden(self, state, obs):
        x = T.embedding(self.params[self.prefix + "emb"], obs)
        if self.attention is not None:
            ctx, _ = self.attend(state)
            x = T.concat([x, ctx], axis=1)
        h, rnn_state = self.rnn.step(x, state["rnn"])
        new = dict(state)
        new["rnn"] = rnn_state
        new["h"] = h
        return h, new

    def step(self, state, obs):
        h, state = self.step_hidden(state, obs)
        return state, nd.linear(h, self.params, self.prefix + "out.")

    def outputs(self, obs, context=None):
        """Teacher-forced outputs for padded ``obs`` [B, T], time-major [T*B, A]."""
        B, Tn = obs.shape
        state = self.initial_state(B, context)
        hs = []
        for t in range(Tn):
            h, state = self.step_hidden(state, obs[:, t])
            hs.append(h)
        H = T.reshape(T.stack(hs, axis=0), (Tn * B, -1))
        return nd.linear(H, self.params, self.prefix + "out.")


class _PolicySampler:
    def __init__(self, head):
        self.head = head
        self.mask = head.env.mask

    def initial_state(self, batch, context=None):
        with T.no_grad():
            return self.head.initial_state(batch, context)

    def step(self, state, obs):
        with T.no_grad():
            state, logits = self.head.step(state, obs)
            p = np.exp(T.log_softmax(logits, self.mask[obs]).data)
        return state, np.where(self.mask[obs], p, 0.0)


class SequencePolicy:
    """Masked softmax policy over a RecurrentHead."""

    def __init__(self, env, cell=None, seed=0, attention=None, params=None, prefix="pol."):
        self.env = env
        self.cell = cell or nd.RecurrentCellConfig("LSTM", 64, 64, 3)
        self.seed = seed
        self.params = params if params is not None else nd.ParameterSet()
        self.head = RecurrentHead(self.params, prefix, env, self.cell,
                                  np.random.default_rng([seed, 1]), attention)
        self.kind = "arnn" if attention else "rnn"
        self.history = []

    @property
    def attention(self):
        return self.head.attention

    def log_probs(self, obs, context=None):
        """Time-major masked log-probabilities [T*B, A] for padded ``obs``."""
        logits = self.head.outputs(obs, context)
        return T.log_softmax(logits, self.env.mask[obs.T.ravel()])

    def nll(self, obs, act, w, context=None):
        lp = T.pick(self.log_probs(obs, context), act.T.ravel())
        wt = w.T.ravel()
        return T.mul(T.tsum(T.mul(lp, wt)), -1.0 / wt.sum())

    def sampler(self):
        return _PolicySampler(self.head)

    def next_probs(self, prefixes, context=None):
        """Next-step action distribution after each observation prefix."""
        B = len(prefixes)
        # padding would change the recurrent state, so batch per prefix length
        out = np.zeros((B, self.env.n_actions))
        lengths = np.array([len(p) for p in prefixes])
        for n in np.unique(lengths):
            rows = np.nonzero(lengths == n)[0]
            sub = np.array([prefixes[r] for r in rows], dtype=np.int64)
            ctx = None if context is None else np.asarray(context)[rows]
            with T.no_grad():
                lp = self.log_probs(sub, ctx).data.reshape(n, len(rows), -1)[-1]
            out[rows] = np.where(self.env.mask[sub[:, -1]], np.exp(lp), 0.0)
        return out

    def config(self):
        d = {"cell": asdict(self.cell), "seed": self.seed}
        if self.attention:
            d["attention"] = asdict(self.attention)
        return d


def _check_finite(value, what, epoch):
    if not np.isfinite(value):
        raise TrainingDivergence(f"{what} became {value} at epoch {epoch}")


def fit_sequence(policy, obs, act, w, epochs, lr, batch_size=128, seed=0, contexts=None,
                 clip=5.0, log_every=0, opt_params=None):
    """Teacher-forced cross-entropy with Adam; returns epoch-mean losses."""
    opt_params = policy.params if opt_params is None else opt_params
    rng = np.random.default_rng([seed, 2])
    n = obs.shape[0]
    hist = []
    for ep in range(epochs):
        perm = rng.permutation(n)
        tot, cnt = 0.0, 0.0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            ctx = None if contexts is None else contexts[idx]
            # trim padding columns
            Tn = int(w[idx].sum(axis=1).max())
            loss = policy.nll(obs[idx, :Tn], act[idx, :Tn], w[idx, :Tn], ctx)
            _check_finite(loss.item(), "loss", ep)
            loss.backward()
            nd.adam_step(opt_params, lr, clip=clip)
            k = w[idx].sum()
            tot += loss.item() * k
            cnt += k
        hist.append(tot / cnt)
        if log_every and (ep + 1) % log_every == 0:
            log.info("epoch %d loss %.5f", ep + 1, hist[-1])
    policy.history.extend(hist)
    return hist


def rnn_train(ds, env, epochs=20, lr=5e-3, cell=None, seed=0, batch_size=128):
    """Behaviour-cloned next-location model."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    policy = SequencePolicy(env, cell, seed)
    obs, act, w = encode(env, ds)
    fit_sequence(policy, obs, act, w, epochs, lr, batch_size, seed)
    return policy


def arnn_train(ds, env, contexts, epochs=20, lr=5e-3, cell=None, seed=0, batch_size=128,
               attn_size=32):
    """Attention RNN conditioned on per-trajectory traffic states [n, N, bins]."""
    if contexts is None:
        raise ValueError("missing traffic state")
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 3 or contexts.shape[0] != len(ds):
        raise ValueError("contexts must be [n_trajectories, N, bins]")
    att = AttentionConfig(contexts.shape[1], contexts.shape[2], attn_size)
    policy = SequencePolicy(env, cell, seed, attention=att)
    obs, act, w = encode(env, ds)
    fit_sequence(policy, obs, act, w, epochs, lr, batch_size, seed, contexts)
    return policy


def sequence_cross_entropy(policy, ds, contexts=None, batch_size=512):
    """Mean per-step negative log-likelihood of ``ds`` (End step included)."""
    obs, act, w = encode(policy.env, ds)
    tot = 0.0
    for s in range(0, len(ds), batch_size):
        sl = slice(s, s + batch_size)
        ctx = None if contexts is None else np.asarray(contexts)[sl]
        with T.no_grad():
            tot += policy.nll(obs[sl], act[sl], w[sl], ctx).item() * w[sl].sum()
    return tot / w.sum()
