"""Minimal numpy layers with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]`` owned by the model; each
layer only remembers the names of its tensors. ``forward`` returns the output
and a cache, ``backward`` consumes the cache, accumulates parameter gradients
into a dict of the same keys and returns the input gradient.

Sequence tensors are channels-last: ``[batch, length, channels]``.
"""

from __future__ import annotations

import numpy as np


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, name, din, dout):
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.din, self.dout = din, dout

    def init(self, params, rng):
        bound = 1.0 / np.sqrt(self.din)
        params[self.w] = _uniform(rng, bound, (self.din, self.dout))
        params[self.b] = _uniform(rng, bound, (self.dout,))

    def forward(self, p, x):
        return x @ p[self.w] + p[self.b], x

    def backward(self, p, grads, cache, dy):
        x = cache
        x2 = x.reshape(-1, self.din)
        dy2 = dy.reshape(-1, self.dout)
        _acc(grads, self.w, x2.T @ dy2)
        _acc(grads, self.b, dy2.sum(axis=0))
        return dy @ p[self.w].T


class Conv1d:
    """'Same'-padded 1-D convolution with odd kernel size."""

    def __init__(self, name, cin, cout, kernel=3):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.cin, self.cout, self.k = cin, cout, kernel

    def init(self, params, rng):
        bound = 1.0 / np.sqrt(self.cin * self.k)
        params[self.w] = _uniform(rng, bound, (self.k * self.cin, self.cout))
        params[self.b] = _uniform(rng, bound, (self.cout,))

    def forward(self, p, x):
        B, L, C = x.shape
        pad = self.k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
        cols = np.concatenate([xp[:, j:j + L, :] for j in range(self.k)], axis=2)
        cols = cols.reshape(B * L, self.k * C)
        y = cols @ p[self.w] + p[self.b]
        return y.reshape(B, L, self.cout), (cols, x.shape)

    def backward(self, p, grads, cache, dy):
        cols, (B, L, C) = cache
        dy2 = dy.reshape(B * L, self.cout)
        _acc(grads, self.w, cols.T @ dy2)
        _acc(grads, self.b, dy2.sum(axis=0))
        dcols = (dy2 @ p[self.w].T).reshape(B, L, self.k, C)
        pad = self.k // 2
        dxp = np.zeros((B, L + 2 * pad, C))
        for j in range(self.k):
            dxp[:, j:j + L, :] += dcols[:, :, j, :]
        return dxp[:, pad:pad + L, :]


class GroupNorm:
    def __init__(self, name, channels, groups, eps=1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.c, self.g, self.eps = channels, groups, eps

    def init(self, params, rng):
        params[self.w] = np.ones(self.c)
        params[self.b] = np.zeros(self.c)

    def forward(self, p, x):
        B, L, C = x.shape
        xg = x.reshape(B, L, self.g, C // self.g)
        mu = xg.mean(axis=(1, 3), keepdims=True)
        var = xg.var(axis=(1, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(B, L, C)
        return xhat * p[self.w] + p[self.b], (xhat, inv)

    def backward(self, p, grads, cache, dy):
        xhat, inv = cache
        B, L, C = dy.shape
        _acc(grads, self.w, (dy * xhat).sum(axis=(0, 1)))
        _acc(grads, self.b, dy.sum(axis=(0, 1)))
        dxhat = (dy * p[self.w]).reshape(B, L, self.g, C // self.g)
        xh = xhat.reshape(B, L, self.g, C // self.g)
        n = L * (C // self.g)
        dx = inv / n * (n * dxhat - dxhat.sum(axis=(1, 3), keepdims=True)
                        - xh * (dxhat * xh).sum(axis=(1, 3), keepdims=True))
        return dx.reshape(B, L, C)


class MLP:
    """Linear -> SiLU -> Linear."""

    def __init__(self, name, din, dhidden, dout):
        self.l1 = Linear(f"{name}.0", din, dhidden)
        self.l2 = Linear(f"{name}.1", dhidden, dout)

    def init(self, params, rng):
        self.l1.init(params, rng)
        self.l2.init(params, rng)

    def forward(self, p, x):
        h, c1 = self.l1.forward(p, x)
        a, ca = silu(h)
        y, c2 = self.l2.forward(p, a)
        return y, (c1, ca, c2)

    def backward(self, p, grads, cache, dy):
        c1, ca, c2 = cache
        da = self.l2.backward(p, grads, c2, dy)
        return self.l1.backward(p, grads, c1, silu_backward(da, ca))


def avgpool2(x):
    B, L, C = x.shape
    return x.reshape(B, L // 2, 2, C).mean(axis=2)


def avgpool2_backward(dy):
    return np.repeat(dy, 2, axis=1) * 0.5


def upsample2(x):
    return np.repeat(x, 2, axis=1)


def upsample2_backward(dy):
    B, L, C = dy.shape
    return dy.reshape(B, L // 2, 2, C).sum(axis=2)


def sinusoidal_embedding(k, dim):
    """Transformer-style features of integer diffusion steps, shape [B, dim]."""
    k = np.asarray(k, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(k), 1))], axis=1)
    return emb


class Adam:
    """Adam with in-place updates, so arrays shared with codebooks stay linked."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v * (1.0 / c2))
            denom += self.eps
            step = m * (self.lr / c1)
            step /= denom
            params[name] -= step

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, t):
        self.t = t
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            (self.m if kind == "adam.m" else self.v)[name] = arr.copy()
