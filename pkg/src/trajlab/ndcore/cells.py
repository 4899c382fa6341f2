"""Recurrent cells and the small layers the trajectory models share."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParameterSet, init_uniform


@dataclass(frozen=True)
class RecurrentCellConfig:
    kind: str = "LSTM"
    input_size: int = 64
    hidden_size: int = 64
    layers: int = 1

    def __post_init__(self):
        if self.kind not in ("GRU", "LSTM"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if min(self.input_size, self.hidden_size, self.layers) < 1:
            raise ValueError("cell sizes must be >= 1")


def add_gru(params, prefix, input_size, hidden, rng):
    """Register GRU weights: U [I x 3H], W [H x 3H], b [3H], gate order z, r, h."""
    params.add(prefix + "U", init_uniform(rng, (input_size, 3 * hidden), hidden))
    params.add(prefix + "W", init_uniform(rng, (hidden, 3 * hidden), hidden))
    params.add(prefix + "b", np.zeros(3 * hidden))


def add_lstm(params, prefix, input_size, hidden, rng):
    """Register LSTM weights: Wx [I x 4H], Wh [H x 4H], b [4H], gate order i, f, g, o."""
    params.add(prefix + "Wx", init_uniform(rng, (input_size, 4 * hidden), hidden))
    params.add(prefix + "Wh", init_uniform(rng, (hidden, 4 * hidden), hidden))
    params.add(prefix + "b", np.zeros(4 * hidden))


def _check(x, s, w_in, w_rec, gates):
    if x.data.ndim != 2 or s.data.ndim != 2:
        raise T.DimensionError("cell inputs must be 2-D")
    if x.shape[0] != s.shape[0]:
        raise T.DimensionError(f"batch mismatch {x.shape} vs {s.shape}")
    hidden = w_rec.shape[0]
    if w_in.shape != (x.shape[1], gates * hidden) or s.shape[1] != hidden:
        raise T.DimensionError(
            f"input {x.shape} / state {s.shape} do not fit weights {w_in.shape}, {w_rec.shape}")
    return hidden


def gru_step(x, s_prev, params, prefix=""):
    """s = (1 - z) * h + z * s_prev with z, r sigmoid gates and tanh candidate h."""
    x, s_prev = T.as_tensor(x), T.as_tensor(s_prev)
    U, W, b = params[prefix + "U"], params[prefix + "W"], params[prefix + "b"]
    H = _check(x, s_prev, U, W, 3)
    xu = T.add(T.matmul(x, U), b)
    sw = T.matmul(s_prev, W[:, :2 * H])
    z = T.sigmoid(T.add(xu[:, :H], sw[:, :H]))
    r = T.sigmoid(T.add(xu[:, H:2 * H], sw[:, H:]))
    h = T.tanh(T.add(xu[:, 2 * H:], T.matmul(T.mul(s_prev, r), W[:, 2 * H:])))
    return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, s_prev))


def lstm_step(x, state, params, prefix=""):
    x = T.as_tensor(x)
    h_prev, c_prev = (T.as_tensor(s) for s in state)
    Wx, Wh, b = params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"]
    H = _check(x, h_prev, Wx, Wh, 4)
    pre = T.add(T.add(T.matmul(x, Wx), T.matmul(h_prev, Wh)), b)
    i = T.sigmoid(pre[:, :H])
    f = T.sigmoid(pre[:, H:2 * H])
    g = T.tanh(pre[:, 2 * H:3 * H])
    o = T.sigmoid(pre[:, 3 * H:])
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_fused(x, h_prev, c_prev, params, prefix=""):
    """Same map as :func:`lstm_step` recorded as one graph node.

    Returns a [B, 2H] tensor holding ``h`` then ``c``.
    """
    x, h_prev, c_prev = T.as_tensor(x), T.as_tensor(h_prev), T.as_tensor(c_prev)
    Wx, Wh, b = params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"]
    H = _check(x, h_prev, Wx, Wh, 4)
    pre = x.data @ Wx.data + h_prev.data @ Wh.data + b.data
    gates = _sig(pre)
    i, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 3 * H:]
    g = np.tanh(pre[:, 2 * H:3 * H])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def back(grad):
        dh, dc = grad[:, :H], grad[:, H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dpre = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev.data * f * (1.0 - f),
                               dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)], axis=1)
        return (dpre @ Wx.data.T, dpre @ Wh.data.T, dc * f,
                x.data.T @ dpre, h_prev.data.T @ dpre, dpre.sum(axis=0))

    return T._make(np.concatenate([h, c], axis=1), (x, h_prev, c_prev, Wx, Wh, b), back)


def gru_fused(x, s_prev, params, prefix=""):
    """Same map as :func:`gru_step` recorded as one graph node."""
    x, s_prev = T.as_tensor(x), T.as_tensor(s_prev)
    U, W, b = params[prefix + "U"], params[prefix + "W"], params[prefix + "b"]
    H = _check(x, s_prev, U, W, 3)
    s = s_prev.data
    xu = x.data @ U.data + b.data
    sw = s @ W.data[:, :2 * H]
    z = _sig(xu[:, :H] + sw[:, :H])
    r = _sig(xu[:, H:2 * H] + sw[:, H:])
    sr = s * r
    h = np.tanh(xu[:, 2 * H:] + sr @ W.data[:, 2 * H:])
    out = (1.0 - z) * h + z * s

    def back(g):
        dh = g * (1.0 - z) * (1.0 - h * h)
        dz = g * (s - h) * z * (1.0 - z)
        dsr = dh @ W.data[:, 2 * H:].T
        dr = dsr * s * r * (1.0 - r)
        dzr = np.concatenate([dz, dr], axis=1)
        dxu = np.concatenate([dz, dr, dh], axis=1)
        ds = g * z + dsr * r + dzr @ W.data[:, :2 * H].T
        dW = np.concatenate([s.T @ dzr, sr.T @ dh], axis=1)
        return dxu @ U.data.T, ds, x.data.T @ dxu, dW, dxu.sum(axis=0)

    return T._make(out, (x, s_prev, U, W, b), back)


class StackedRNN:
    """Multi-layer GRU/LSTM whose weights live in a shared ParameterSet."""

    def __init__(self, params: ParameterSet, prefix: str, config: RecurrentCellConfig, rng):
        self.params = params
        self.prefix = prefix
        self.config = config
        adder = add_gru if config.kind == "GRU" else add_lstm
        for layer in range(config.layers):
            size = config.input_size if layer == 0 else config.hidden_size
            adder(params, f"{prefix}l{layer}.", size, config.hidden_size, rng)

    def zero_state(self, batch):
        H = self.config.hidden_size
        if self.config.kind == "GRU":
            return [T.Tensor(np.zeros((batch, H))) for _ in range(self.config.layers)]
        return [(T.Tensor(np.zeros((batch, H))), T.Tensor(np.zeros((batch, H))))
                for _ in range(self.config.layers)]

    def state_from_hidden(self, hidden_list):
        """Initial state whose hidden vectors are given (cell memories zero)."""
        if self.config.kind == "GRU":
            return list(hidden_list)
        return [(h, T.Tensor(np.zeros(h.shape))) for h in hidden_list]

    def step(self, x, state, fused=True):
        """Advance every layer once; returns (top hidden, new state)."""
        new_state = []
        inp = x
        H = self.config.hidden_size
        for layer, s in enumerate(state):
            p = f"{self.prefix}l{layer}."
            if self.config.kind == "GRU":
                s = gru_fused(inp, s, self.params, p) if fused else gru_step(inp, s, self.params, p)
                inp = s
            else:
                if fused:
                    hc = lstm_fused(inp, s[0], s[1], self.params, p)
                    s = (hc[:, :H], hc[:, H:])
                else:
                    s = lstm_step(inp, s, self.params, p)
                inp = s[0]
            new_state.append(s)
        return inp, new_state

    @staticmethod
    def select(state, rows):
        """Keep batch ``rows`` of a (non-differentiable) state."""
        out = []
        for s in state:
            if isinstance(s, tuple):
                out.append((T.Tensor(s[0].data[rows]), T.Tensor(s[1].data[rows])))
            else:
                out.append(T.Tensor(s.data[rows]))
        return out


def add_linear(params, prefix, n_in, n_out, rng):
    params.add(prefix + "W", init_uniform(rng, (n_in, n_out), n_in))
    params.add(prefix + "b", np.zeros(n_out))


def linear(x, params, prefix):
    return T.add(T.matmul(x, params[prefix + "W"]), params[prefix + "b"])
