"""Per-view 2D lane decoder with hierarchical queries and deformable cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .nn import FFN, LayerNorm, Linear, MultiHeadAttention, sine_embedding


def compose_hierarchical_queries(q_ins, q_pt):
    """Instance-major grid of ``q_ins[i] + q_pt[j]``: (N_L, C) + (N_P, C) -> (N_L*N_P, C)."""
    q_ins = ad.as_tensor(q_ins)
    q_pt = ad.as_tensor(q_pt, q_ins)
    if q_ins.shape[-1] != q_pt.shape[-1]:
        raise ConfigError(f"query widths differ: {q_ins.shape[-1]} vs {q_pt.shape[-1]}")
    nl, c = q_ins.shape
    npt = q_pt.shape[0]
    return (q_ins.reshape(nl, 1, c) + q_pt.reshape(1, npt, c)).reshape(nl * npt, c)


def _offset_grid(heads, levels, points):
    """Directional initial offsets: head h points along angle 2*pi*h/heads, point k at radius k+1."""
    theta = np.arange(heads) * (2 * math.pi / heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    grid *= np.arange(1, points + 1)[None, None, :, None]
    return grid


class MSDeformAttn:
    """Multi-scale deformable attention over a batch of views.

    For each query, head, level and sampling point an offset (in pixels of
    that level) and a weight are linear in the query; weights are softmaxed
    jointly over levels and points.
    """

    def __init__(self, store, name, dim, heads, levels, points, rng):
        if dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.offsets = Linear(store, f"{name}.sampling_offsets", dim, heads * levels * points * 2, rng, zero=True)
        self.offsets.bias.data[:] = _offset_grid(heads, levels, points).ravel()
        self.attn = Linear(store, f"{name}.attention_weights", dim, heads * levels * points, rng, zero=True)
        self.value_proj = Linear(store, f"{name}.value_proj", dim, dim, rng)
        self.output_proj = Linear(store, f"{name}.output_proj", dim, dim, rng)

    def __call__(self, query, values, shapes, ref):
        """query (B, Nq, C); values[v] (B, H_v*W_v, C); ref (B, Nq, 2) normalised."""
        b, nq, c = query.shape
        h, lv, k = self.heads, self.levels, self.points
        d = c // h
        off = self.offsets(query).reshape(b, nq, h, lv, k, 2)
        aw = ad.softmax(self.attn(query).reshape(b, nq, h, lv * k), axis=-1).reshape(b, nq, h, lv, k)
        ref = ad.as_tensor(ref, query).reshape(b, nq, 1, 1, 2)
        out = None
        for v, (hv, wv) in enumerate(shapes):
            val = self.value_proj(values[v]).reshape(b, hv, wv, h, d).transpose(0, 3, 1, 2, 4)
            val = val.reshape(b * h, hv, wv, d)
            scale = np.array([1.0 / wv, 1.0 / hv], dtype=query.dtype)
            loc = ref + off[:, :, :, v] * scale  # (b, nq, h, k, 2)
            loc = loc.transpose(0, 2, 1, 3, 4).reshape(b * h, nq * k, 2)
            s = ad.grid_sample(val, loc).reshape(b, h, nq, k, d)
            w = aw[:, :, :, v].transpose(0, 2, 1, 3).reshape(b, h, nq, k, 1)
            term = (s * w).sum(axis=3)  # (b, h, nq, d)
            out = term if out is None else out + term
        out = out.transpose(0, 2, 1, 3).reshape(b, nq, c)
        return self.output_proj(out)


class DecoderLayer2D:
    """Self-attention, deformable cross-attention and FFN, each as LN(f(x)) + x."""

    def __init__(self, store, name, cfg, rng):
        c = cfg.dim
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", c, cfg.heads, rng)
        self.cross_attn = MSDeformAttn(store, f"{name}.cross_attn", c, cfg.heads, cfg.scene.levels,
                                       cfg.sample_points, rng)
        self.ffn = FFN(store, f"{name}.ffn", c, cfg.ffn_dim, rng)
        self.norm1 = LayerNorm(store, f"{name}.norm1", c)
        self.norm2 = LayerNorm(store, f"{name}.norm2", c)
        self.norm3 = LayerNorm(store, f"{name}.norm3", c)

    def __call__(self, q, pos, ref, values, shapes):
        qp = q + pos
        x = self.norm1(self.self_attn(qp, qp, q)) + q
        xh = self.norm2(self.cross_attn(x + pos, values, shapes, ref)) + x
        return self.norm3(self.ffn(xh)) + xh


@dataclass
class Prediction2D:
    scores: ad.Tensor  # (B, N_L, num_classes + 1) logits
    points: ad.Tensor  # (B, N_L, N_P, 2) normalised image coordinates
    query: ad.Tensor  # (B, N_L*N_P, C) updated hierarchical queries


class LaneHead2D:
    def __init__(self, store, name, dim, num_classes, rng):
        self.cls = Linear(store, f"{name}.cls", dim, num_classes + 1, rng)
        self.reg = Linear(store, f"{name}.reg", dim, 2, rng)

    def __call__(self, q, n_lanes, n_points):
        b, _, c = q.shape
        pooled = q.reshape(b, n_lanes, n_points, c).mean(axis=2)
        scores = self.cls(pooled)
        points = ad.sigmoid(self.reg(q)).reshape(b, n_lanes, n_points, 2)
        return Prediction2D(scores, points, q)


def position_embedding_2d(ref, dim):
    """Fixed sine embedding of reference points (..., 2) -> (..., dim)."""
    return sine_embedding(ref, dim)


class Lane2DDecoder:
    def __init__(self, store, cfg, rng, name="lane2d"):
        self.cfg = cfg
        c, nl, npt = cfg.dim, cfg.n_lanes, cfg.n_points
        self.q_ins = store.add(f"{name}.instance_queries", rng.normal(0, 1, (nl, c)))
        self.q_pt = store.add(f"{name}.point_queries", rng.normal(0, 1, (npt, c)))
        seed = rng.uniform(0.1, 0.9, (nl * npt, 2))
        self.ref_seed = store.add(f"{name}.reference_seed", np.log(seed / (1 - seed)))
        self.layers = [DecoderLayer2D(store, f"{name}.layers.{i}", cfg, rng) for i in range(cfg.layers_2d)]
        self.head = LaneHead2D(store, f"{name}.head", c, cfg.scene.num_lane_classes, rng)

    def __call__(self, values, shapes):
        """Run all layers on ``B`` views; returns one :class:`Prediction2D` per layer."""
        cfg = self.cfg
        b = values[0].shape[0]
        q0 = compose_hierarchical_queries(self.q_ins, self.q_pt)
        q = q0.reshape(1, *q0.shape) * np.ones((b, 1, 1), dtype=q0.dtype)
        ref_t = ad.sigmoid(self.ref_seed)
        ref = ref_t.reshape(1, *ref_t.shape) * np.ones((b, 1, 1), dtype=q0.dtype)
        preds = []
        for layer in self.layers:
            pos = ad.Tensor(position_embedding_2d(ref.data, cfg.dim).astype(q.dtype))
            q = layer(q, pos, ref, values, shapes)
            pred = self.head(q, cfg.n_lanes, cfg.n_points)
            preds.append(pred)
            if cfg.refine_2d:
                ref = ad.Tensor(pred.points.data.reshape(b, -1, 2).copy())
        return preds
