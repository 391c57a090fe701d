"""A single-layer LSTM in numpy with backpropagation through time, plus Adam.

Parameters live in a plain ``dict`` of float64 arrays. Gates are stacked in
the order input, forget, candidate, output along the first axis of
``Wx`` (4H x D), ``Wh`` (4H x H) and ``b`` (4H).
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidArgument


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def init_lstm(rng, input_size, hidden_size, prefix="", forget_bias=1.0):
    """Uniform(+-1/sqrt(H)) weights; forget-gate bias starts at ``forget_bias``."""
    k = 1.0 / math.sqrt(hidden_size)
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = forget_bias
    return {
        prefix + "Wx": rng.uniform(-k, k, (4 * hidden_size, input_size)),
        prefix + "Wh": rng.uniform(-k, k, (4 * hidden_size, hidden_size)),
        prefix + "b": b,
    }


def init_dense(rng, n_in, n_out, prefix):
    k = 1.0 / math.sqrt(n_in)
    return {prefix + "W": rng.uniform(-k, k, (n_out, n_in)), prefix + "b": np.zeros(n_out)}


def lstm_forward(params, xs, prefix=""):
    """Run the LSTM over ``xs`` of shape (B, T, D) or (T, D) from zero state.

    Returns ``(hidden, cache)`` with hidden states shaped like ``xs`` but
    with the last axis of size H.
    """
    wx, wh, b = params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"]
    xs = np.asarray(xs, dtype=np.float64)
    single = xs.ndim == 2
    if single:
        xs = xs[None]
    if xs.ndim != 3 or xs.shape[2] != wx.shape[1]:
        raise InvalidArgument(f"expected inputs (B, T, {wx.shape[1]}), got {xs.shape}")
    n, steps, _ = xs.shape
    hsz = wh.shape[1]
    zx = xs @ wx.T + b                       # input contributions for all steps at once
    h = np.zeros((n, hsz))
    c = np.zeros((n, hsz))
    hs = np.empty((n, steps, hsz))
    cs = np.empty((n, steps, hsz))
    gates = np.empty((n, steps, 4 * hsz))
    for t in range(steps):
        a = zx[:, t] + h @ wh.T
        i = sigmoid(a[:, :hsz])
        f = sigmoid(a[:, hsz:2 * hsz])
        g = np.tanh(a[:, 2 * hsz:3 * hsz])
        o = sigmoid(a[:, 3 * hsz:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        hs[:, t], cs[:, t] = h, c
    cache = (xs, hs, cs, gates, prefix, single)
    return (hs[0] if single else hs), cache


def lstm_backward(params, cache, dhs):
    """Gradients of a loss with respect to the LSTM parameters and inputs.

    ``dhs`` is dLoss/dh for every step, shaped like the forward output.
    Returns ``(grads, dxs)``.
    """
    xs, hs, cs, gates, prefix, single = cache
    wx, wh = params[prefix + "Wx"], params[prefix + "Wh"]
    dhs = np.asarray(dhs, dtype=np.float64)
    if single:
        dhs = dhs[None]
    n, steps, hsz = hs.shape
    da_all = np.empty((n, steps, 4 * hsz))
    dh_next = np.zeros((n, hsz))
    dc_next = np.zeros((n, hsz))
    for t in range(steps - 1, -1, -1):
        i, f, g, o = np.split(gates[:, t], 4, axis=1)
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(c)
        tc = np.tanh(c)
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        da_all[:, t] = da
        dh_next = da @ wh
        dc_next = dc * f
    h_prev = np.concatenate([np.zeros((n, 1, hsz)), hs[:, :-1]], axis=1)
    grads = {
        prefix + "Wx": np.einsum("nta,ntd->ad", da_all, xs),
        prefix + "Wh": np.einsum("nta,nth->ah", da_all, h_prev),
        prefix + "b": da_all.sum(axis=(0, 1)),
    }
    dxs = da_all @ wx
    return grads, (dxs[0] if single else dxs)


def flatten(params, names=None):
    names = names or sorted(params)
    return np.concatenate([params[k].ravel() for k in names])


def unflatten(vec, like, names=None):
    names = names or sorted(like)
    out, pos = {}, 0
    for k in names:
        size = like[k].size
        out[k] = vec[pos:pos + size].reshape(like[k].shape).copy()
        pos += size
    return out


def numerical_gradient(loss_fn, params, eps=1e-5):
    """Central finite differences of ``loss_fn(params)`` for every entry."""
    grads = {}
    for k, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = loss_fn(params)
            flat[j] = keep - eps
            down = loss_fn(params)
            flat[j] = keep
            gf[j] = (up - down) / (2 * eps)
        grads[k] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


class Adam:
    """Adaptive-moment optimizer over a parameter dict, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total
