"""Recurrent encoder over the grid representations of one interval.

The default cell is a vanilla tanh recurrence whose output equals its state;
an LSTM cell is available behind the same interface. Inputs may carry a
leading batch axis: ``grids`` is ``(K, d)`` or ``(B, K, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidLength

CELLS = ("vanilla", "lstm")


@dataclass
class RnnParams:
    w_in: np.ndarray   # (G*H, d)
    w_rec: np.ndarray  # (G*H, H)
    b: np.ndarray      # (G*H,)
    cell: str = "vanilla"

    @property
    def hidden_dim(self) -> int:
        return self.w_rec.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_in.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_in": self.w_in, "w_rec": self.w_rec, "b": self.b}

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, seed: int = 0,
             cell: str = "vanilla") -> "RnnParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
        if cell not in CELLS:
            raise ValueError(f"unknown cell {cell!r}")
        gates = 4 if cell == "lstm" else 1
        rng = np.random.default_rng(seed)
        a_in = 1.0 / np.sqrt(input_dim)
        a_rec = 1.0 / np.sqrt(hidden_dim)
        w_in = rng.uniform(-a_in, a_in, size=(gates * hidden_dim, input_dim))
        w_rec = rng.uniform(-a_rec, a_rec, size=(gates * hidden_dim, hidden_dim))
        return cls(w_in, w_rec, np.zeros(gates * hidden_dim), cell)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def rnn_step(y, state, params: RnnParams):
    """One application of the cell.

    ``state`` is the cell state ``c`` for the vanilla cell and the pair
    ``(h, c)`` for the LSTM. Returns ``(output, new_state)``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != params.input_dim:
        raise InvalidLength(f"input dim {y.shape[-1]} != {params.input_dim}")
    if params.cell == "vanilla":
        c_prev = np.asarray(state, dtype=np.float64)
        if c_prev.shape[-1] != params.hidden_dim:
            raise InvalidLength(f"state dim {c_prev.shape[-1]} != {params.hidden_dim}")
        c = np.tanh(y @ params.w_in.T + c_prev @ params.w_rec.T + params.b)
        return c, c
    h_prev, c_prev = state
    if h_prev.shape[-1] != params.hidden_dim:
        raise InvalidLength(f"state dim {h_prev.shape[-1]} != {params.hidden_dim}")
    z = y @ params.w_in.T + h_prev @ params.w_rec.T + params.b
    i, f, g, o = np.split(z, 4, axis=-1)
    c = _sigmoid(f) * c_prev + _sigmoid(i) * np.tanh(g)
    h = _sigmoid(o) * np.tanh(c)
    return h, (h, c)


def initial_state(params: RnnParams, batch_shape=()):
    zeros = np.zeros(tuple(batch_shape) + (params.hidden_dim,))
    return zeros if params.cell == "vanilla" else (zeros, zeros.copy())


def rnn_forward(grids, params: RnnParams):
    """Run the cell over ``K`` grid vectors from the zero state.

    Returns ``(o_K, tape)`` where the tape holds everything the backward
    pass needs.
    """
    y = np.asarray(grids, dtype=np.float64)
    if y.ndim < 2 or y.shape[-2] == 0:
        raise EmptyInput("rnn_forward needs at least one grid")
    if y.shape[-1] != params.input_dim:
        raise InvalidLength(f"grid dim {y.shape[-1]} != {params.input_dim}")
    steps = y.shape[-2]
    state = initial_state(params, y.shape[:-2])
    states = [state]
    out = None
    for k in range(steps):
        if params.cell == "vanilla":
            out, state = rnn_step(y[..., k, :], state, params)
        else:
            out, state = _lstm_step_cached(y[..., k, :], state[:2], params)
        states.append(state)
    return out, {"inputs": y, "states": states, "cell": params.cell}


def _lstm_step_cached(y, state, params):
    h_prev, c_prev = state
    z = y @ params.w_in.T + h_prev @ params.w_rec.T + params.b
    zi, zf, zg, zo = np.split(z, 4, axis=-1)
    i, f, g, o = _sigmoid(zi), _sigmoid(zf), np.tanh(zg), _sigmoid(zo)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, (h, c, (i, f, g, o, tc))


def rnn_backward(tape, grad_out, params: RnnParams):
    """Backpropagation through time for ``<grad_out, o_K>``.

    Returns ``(param_grads, grad_inputs)``: parameter gradients summed over
    any batch axis and an array shaped like the forward inputs.
    """
    y = tape["inputs"]
    states = tape["states"]
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != y.shape[:-2] + (params.hidden_dim,):
        raise InvalidLength(f"grad_out shape {g.shape} does not match the tape")
    steps = y.shape[-2]
    gw_in = np.zeros_like(params.w_in)
    gw_rec = np.zeros_like(params.w_rec)
    gb = np.zeros_like(params.b)
    gy = np.zeros_like(y)
    lead = "".join("abcdef"[: y.ndim - 2])
    outer = f"{lead}i,{lead}j->ij"

    if params.cell == "vanilla":
        g_c = g
        for k in range(steps - 1, -1, -1):
            c = states[k + 1]
            c_prev = states[k]
            g_a = g_c * (1.0 - c ** 2)
            gw_in += np.einsum(outer, g_a, y[..., k, :])
            gw_rec += np.einsum(outer, g_a, c_prev)
            gb += g_a.reshape(-1, g_a.shape[-1]).sum(axis=0)
            gy[..., k, :] = g_a @ params.w_in
            g_c = g_a @ params.w_rec
    else:
        g_h = g
        g_c = np.zeros_like(g)
        for k in range(steps - 1, -1, -1):
            h_prev, c_prev = states[k][0], states[k][1]
            _, c, (i, f, gg, o, tc) = states[k + 1]
            g_o = g_h * tc
            g_c = g_c + g_h * o * (1.0 - tc ** 2)
            g_i = g_c * gg
            g_f = g_c * c_prev
            g_g = g_c * i
            g_z = np.concatenate([g_i * i * (1 - i), g_f * f * (1 - f),
                                  g_g * (1 - gg ** 2), g_o * o * (1 - o)], axis=-1)
            gw_in += np.einsum(outer, g_z, y[..., k, :])
            gw_rec += np.einsum(outer, g_z, h_prev)
            gb += g_z.reshape(-1, g_z.shape[-1]).sum(axis=0)
            gy[..., k, :] = g_z @ params.w_in
            g_h = g_z @ params.w_rec
            g_c = g_c * f
    return {"w_in": gw_in, "w_rec": gw_rec, "b": gb}, gy
