"""Layers with hand-written backward passes.

Every layer maps a batch tensor forward, keeps a cache, and maps the
upstream gradient back to (input gradient, parameter gradients). Sequence
tensors are (batch, time, features), oldest step first.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ----------------------------------------------------------------- single cells


def lstm_step_forward(x, h_prev, c_prev, W, b):
    """Gate order in W/b columns: input, forget, output, candidate."""
    n = h_prev.shape[-1]
    z = np.concatenate([x, h_prev], axis=-1) @ W + b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    o = sigmoid(z[..., 2 * n:3 * n])
    g = np.tanh(z[..., 3 * n:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, W):
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    xh = np.concatenate([x, h_prev], axis=-1)
    dW = xh.reshape(-1, xh.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
    db = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    dxh = dz @ W.T
    d = x.shape[-1]
    return dxh[..., :d], dxh[..., d:], dc * f, dW, db


def lstm_cell_step(x, h_prev, c_prev, params):
    """One LSTM step; ``params`` holds ``W`` (in+hidden, 4*hidden) and ``b`` (4*hidden)."""
    x, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x, h_prev, c_prev))
    W, b = params["W"], params["b"]
    n = h_prev.shape[-1]
    if c_prev.shape != h_prev.shape or W.shape != (x.shape[-1] + n, 4 * n) or b.shape != (4 * n,):
        raise ValueError(
            f"shape mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape} W{W.shape} b{b.shape}"
        )
    h, c, _ = lstm_step_forward(x, h_prev, c_prev, W, b)
    return h, c


def gru_step_forward(x, h_prev, Wx, Wh, b):
    """Columns: update z, reset r, candidate. h = (1 - z) h_prev + z h_cand."""
    n = h_prev.shape[-1]
    ax = x @ Wx + b
    ah = h_prev @ Wh[:, :2 * n]
    z = sigmoid(ax[..., :n] + ah[..., :n])
    r = sigmoid(ax[..., n:2 * n] + ah[..., n:])
    rh = r * h_prev
    cand = np.tanh(ax[..., 2 * n:] + rh @ Wh[:, 2 * n:])
    h = (1.0 - z) * h_prev + z * cand
    return h, (x, h_prev, z, r, rh, cand)


def gru_step_backward(dh, cache, Wx, Wh):
    x, h_prev, z, r, rh, cand = cache
    n = h_prev.shape[-1]
    dz = dh * (cand - h_prev)
    dcand = dh * z
    dh_prev = dh * (1.0 - z)
    da_c = dcand * (1.0 - cand * cand)
    drh = da_c @ Wh[:, 2 * n:].T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    da_z = dz * z * (1 - z)
    da_r = dr * r * (1 - r)
    da = np.concatenate([da_z, da_r, da_c], axis=-1)
    dWx = x.T @ da
    db = da.sum(axis=0)
    dWh = np.empty_like(Wh)
    dWh[:, :2 * n] = h_prev.T @ np.concatenate([da_z, da_r], axis=-1)
    dWh[:, 2 * n:] = rh.T @ da_c
    dx = da @ Wx.T
    dh_prev = dh_prev + np.concatenate([da_z, da_r], axis=-1) @ Wh[:, :2 * n].T
    return dx, dh_prev, dWx, dWh, db


def gru_cell_step(x, h_prev, params):
    """One GRU step; ``params`` holds ``Wx`` (in, 3n), ``Wh`` (n, 3n) and ``b`` (3n)."""
    x, h_prev = np.asarray(x, dtype=np.float64), np.asarray(h_prev, dtype=np.float64)
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    n = h_prev.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * n) or Wh.shape != (n, 3 * n) or b.shape != (3 * n,):
        raise ValueError(f"shape mismatch: x{x.shape} h{h_prev.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    h, _ = gru_step_forward(x, h_prev, Wx, Wh, b)
    return h


# ---------------------------------------------------------------------- layers


class Layer:
    name = "layer"

    def init(self, rng: np.random.Generator, scale: float) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x, p):
        raise NotImplementedError

    def backward(self, dy, cache, p):
        raise NotImplementedError


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


class LSTM(Layer):
    name = "lstm"

    def __init__(self, d_in: int, n: int):
        self.d_in, self.n = d_in, n

    def init(self, rng, scale):
        return {"W": _uniform(rng, (self.d_in + self.n, 4 * self.n), scale), "b": np.zeros(4 * self.n)}

    def out_shape(self, in_shape):
        return (in_shape[0], self.n)

    def forward(self, x, p):
        B, T, _ = x.shape
        h = np.zeros((B, self.n))
        c = np.zeros((B, self.n))
        hs = np.empty((B, T, self.n))
        caches = []
        for t in range(T):
            h, c, cache = lstm_step_forward(x[:, t], h, c, p["W"], p["b"])
            hs[:, t] = h
            caches.append(cache)
        return hs, caches

    def backward(self, dy, caches, p):
        B, T, _ = dy.shape
        dx = np.empty((B, T, self.d_in))
        dW = np.zeros_like(p["W"])
        db = np.zeros_like(p["b"])
        dh = np.zeros((B, self.n))
        dc = np.zeros((B, self.n))
        for t in reversed(range(T)):
            dxt, dh, dc, dWt, dbt = lstm_step_backward(dy[:, t] + dh, dc, caches[t], p["W"])
            dx[:, t] = dxt
            dW += dWt
            db += dbt
        return dx, {"W": dW, "b": db}


class GRU(Layer):
    name = "gru"

    def __init__(self, d_in: int, n: int):
        self.d_in, self.n = d_in, n

    def init(self, rng, scale):
        return {
            "Wx": _uniform(rng, (self.d_in, 3 * self.n), scale),
            "Wh": _uniform(rng, (self.n, 3 * self.n), scale),
            "b": np.zeros(3 * self.n),
        }

    def out_shape(self, in_shape):
        return (in_shape[0], self.n)

    def forward(self, x, p):
        B, T, _ = x.shape
        h = np.zeros((B, self.n))
        hs = np.empty((B, T, self.n))
        caches = []
        for t in range(T):
            h, cache = gru_step_forward(x[:, t], h, p["Wx"], p["Wh"], p["b"])
            hs[:, t] = h
            caches.append(cache)
        return hs, caches

    def backward(self, dy, caches, p):
        B, T, _ = dy.shape
        dx = np.empty((B, T, self.d_in))
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dh = np.zeros((B, self.n))
        for t in reversed(range(T)):
            dxt, dh, dWx, dWh, db = gru_step_backward(dy[:, t] + dh, caches[t], p["Wx"], p["Wh"])
            dx[:, t] = dxt
            grads["Wx"] += dWx
            grads["Wh"] += dWh
            grads["b"] += db
        return dx, grads


class Conv1D(Layer):
    """Valid temporal convolution, stride 1, ReLU. Kernel (K, d_in, filters)."""

    name = "conv"

    def __init__(self, d_in: int, filters: int, kernel: int, relu: bool = True):
        self.d_in, self.filters, self.kernel, self.relu = d_in, filters, kernel, relu

    def init(self, rng, scale):
        return {"W": _uniform(rng, (self.kernel, self.d_in, self.filters), scale), "b": np.zeros(self.filters)}

    def out_shape(self, in_shape):
        return (in_shape[0] - self.kernel + 1, self.filters)

    def _patches(self, x):
        B, T, D = x.shape
        L = T - self.kernel + 1
        if L < 1:
            raise ValueError(f"sequence of {T} steps shorter than kernel {self.kernel}")
        idx = np.arange(L)[:, None] + np.arange(self.kernel)[None, :]
        return x[:, idx, :].reshape(B, L, self.kernel * D)

    def forward(self, x, p):
        cols = self._patches(x)
        a = cols @ p["W"].reshape(-1, self.filters) + p["b"]
        y = np.maximum(a, 0.0) if self.relu else a
        return y, (x.shape, cols, a)

    def backward(self, dy, cache, p):
        shape, cols, a = cache
        if self.relu:
            dy = dy * (a > 0)
        B, L, _ = dy.shape
        flat = dy.reshape(-1, self.filters)
        dW = (cols.reshape(-1, cols.shape[-1]).T @ flat).reshape(p["W"].shape)
        db = flat.sum(axis=0)
        dcols = (dy @ p["W"].reshape(-1, self.filters).T).reshape(B, L, self.kernel, self.d_in)
        dx = np.zeros(shape)
        for j in range(self.kernel):
            dx[:, j:j + L, :] += dcols[:, :, j, :]
        return dx, {"W": dW, "b": db}


class Dense(Layer):
    """Affine map on the last axis, optional ReLU. Works on (B, D) and (B, T, D)."""

    name = "dense"

    def __init__(self, d_in: int, d_out: int, relu: bool = False):
        self.d_in, self.d_out, self.relu = d_in, d_out, relu

    def init(self, rng, scale):
        return {"W": _uniform(rng, (self.d_in, self.d_out), scale), "b": np.zeros(self.d_out)}

    def out_shape(self, in_shape):
        return in_shape[:-1] + (self.d_out,)

    def forward(self, x, p):
        a = x @ p["W"] + p["b"]
        y = np.maximum(a, 0.0) if self.relu else a
        return y, (x, a)

    def backward(self, dy, cache, p):
        x, a = cache
        if self.relu:
            dy = dy * (a > 0)
        x2 = x.reshape(-1, self.d_in)
        d2 = dy.reshape(-1, self.d_out)
        return dy @ p["W"].T, {"W": x2.T @ d2, "b": d2.sum(axis=0)}


class Flatten(Layer):
    name = "flatten"

    def init(self, rng, scale):
        return {}

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, p):
        return dy.reshape(shape), {}


class LastStep(Layer):
    name = "last"

    def init(self, rng, scale):
        return {}

    def out_shape(self, in_shape):
        return in_shape[1:]

    def forward(self, x, p):
        return x[:, -1], x.shape

    def backward(self, dy, shape, p):
        dx = np.zeros(shape)
        dx[:, -1] = dy
        return dx, {}
