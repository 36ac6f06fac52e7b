"""Parameterised building blocks: linear maps, MLPs, layer norm, attention."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


class Linear:
    def __init__(self, store: ParameterStore, name, fan_in, fan_out, rng, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else ad.xavier_uniform(rng, fan_in, fan_out)
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros(fan_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class MLP:
    """``depth`` linear layers with ReLU between them (none after the last)."""

    def __init__(self, store, name, dims, rng):
        self.layers = [Linear(store, f"{name}.{i}", a, b, rng)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention:
    def __init__(self, store, name, dim, heads, rng):
        if dim % heads:
            raise ad.ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.weights = {}
        for proj in "qkvo":
            lin = Linear(store, f"{name}.{proj}", dim, dim, rng)
            self.weights[f"{proj}_w"] = lin.weight
            self.weights[f"{proj}_b"] = lin.bias

    def __call__(self, q, k, v):
        return ad.multi_head_attention(q, k, v, self.weights, self.heads)


class FFN:
    def __init__(self, store, name, dim, hidden, rng):
        self.mlp = MLP(store, name, (dim, hidden, dim), rng)

    def __call__(self, x):
        return self.mlp(x)


def sine_embedding(coords, dim, temperature=10000.0):
    """Fixed sine/cosine embedding of normalised coordinates.

    ``coords`` has shape (..., k) with values in [0, 1]; the result has shape
    (..., dim) where each coordinate gets ``dim // k`` channels.
    """
    coords = np.asarray(coords, dtype=np.float64)
    k = coords.shape[-1]
    per = dim // k
    if per % 2 or per * k != dim:
        raise ad.ConfigError(f"sine embedding width {dim} must split into even chunks for {k} coords")
    freqs = temperature ** (2 * (np.arange(per // 2)) / per)
    scaled = coords[..., None] * (2 * math.pi) / freqs  # (..., k, per/2)
    emb = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)
    return emb.reshape(*coords.shape[:-1], dim)


def grid_centers(h, w):
    """Normalised (x, y) centres of an h x w grid, row-major, shape (h*w, 2)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)
