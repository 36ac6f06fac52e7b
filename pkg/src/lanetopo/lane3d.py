"""3D lane stage: query initialisation from 2D priors, global decoder and heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import FFN, MLP, LayerNorm, Linear, MultiHeadAttention, grid_centers, sine_embedding


@dataclass
class LaneQuerySet3D:
    appearance: ad.Tensor  # (S, Nq, C)
    position: ad.Tensor  # (S, Nq, C)
    provenance: np.ndarray  # (l, 2): (camera, 2D instance) or (-1, slot) for learnable queries


@dataclass
class Prediction3D:
    scores: ad.Tensor  # (S, l, num_classes + 1) logits
    unit_points: ad.Tensor  # (S, l, N_P, 3) in [0, 1]^3, BEV-normalised
    query: ad.Tensor
    bev_range: tuple

    @property
    def points(self):
        """Points in metres (numpy)."""
        lo = np.array(self.bev_range[0::2])
        hi = np.array(self.bev_range[1::2])
        return self.unit_points.data * (hi - lo) + lo


def lift_rays(points_px, lift_m, lift_c, depths):
    """World points along the rays of pixels.

    ``points_px`` (S, N_I, Q, 2) pixels (tensor), ``lift_m`` (S, N_I, 3, 3),
    ``lift_c`` (S, N_I, 3), ``depths`` (D,). Returns (S, N_I, Q, D, 3).
    """
    s, ni, q, _ = points_px.shape
    ones = ad.Tensor(np.ones((s, ni, q, 1), dtype=points_px.dtype))
    hom = ad.concat([points_px, ones], axis=-1)
    mt = np.swapaxes(np.asarray(lift_m, dtype=points_px.dtype), -1, -2)
    rays = hom @ mt  # (S, N_I, Q, 3)
    d = np.asarray(depths, dtype=points_px.dtype).reshape(1, 1, 1, -1, 1)
    c = np.asarray(lift_c, dtype=points_px.dtype)[:, :, None, None, :]
    return rays.reshape(s, ni, q, 1, 3) * d + c


def build_3d_pe(points_norm, image_size, lift_m, lift_c, depths, bev_range, mlp):
    """Positional embedding of 2D lane points from their lifted camera rays.

    ``points_norm`` (S, N_I, Q, 2) normalised image coordinates. Each point is
    lifted at every depth, normalised by the BEV range, flattened to D*3
    values and embedded by ``mlp``. Returns (S, N_I*Q, C).
    """
    h, w = image_size
    s, ni, q, _ = points_norm.shape
    px = points_norm * np.array([w, h], dtype=points_norm.dtype)
    world = lift_rays(px, lift_m, lift_c, depths)
    lo = np.array(bev_range[0::2], dtype=points_norm.dtype)
    hi = np.array(bev_range[1::2], dtype=points_norm.dtype)
    unit = (world - lo) * (1.0 / (hi - lo))
    flat = unit.reshape(s, ni * q, len(depths) * 3)
    return mlp(flat)


def key_position_embedding(level_shapes, n_cameras, dim):
    """Sine PE of every feature location of every camera, concatenated like the keys."""
    per_cam = np.concatenate([sine_embedding(grid_centers(h, w), dim) for h, w in level_shapes])
    return np.tile(per_cam, (n_cameras, 1))


class DecoderLayer3D:
    """Global self-attention, multi-view cross-attention and FFN, each as LN(f(x)) + x."""

    def __init__(self, store, name, cfg, rng):
        c = cfg.dim
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", c, cfg.heads, rng)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", c, cfg.heads, rng)
        self.ffn = FFN(store, f"{name}.ffn", c, cfg.ffn_dim, rng)
        self.norm1 = LayerNorm(store, f"{name}.norm1", c)
        self.norm2 = LayerNorm(store, f"{name}.norm2", c)
        self.norm3 = LayerNorm(store, f"{name}.norm3", c)

    def __call__(self, q, pos, keys, key_pe=None):
        qp = q + pos
        y = self.norm1(self.self_attn(qp, qp, q)) + q
        k = keys if key_pe is None else keys + key_pe
        yh = self.norm2(self.cross_attn(y + pos, k, keys)) + y
        return self.norm3(self.ffn(yh)) + yh


class LaneHead3D:
    def __init__(self, store, name, dim, num_classes, points_per_query, n_points, rng):
        self.cls = Linear(store, f"{name}.cls", dim, num_classes + 1, rng)
        self.reg = Linear(store, f"{name}.reg", dim, 3 * points_per_query, rng)
        self.points_per_query = points_per_query
        self.n_points = n_points

    def __call__(self, q, bev_range):
        s, nq, c = q.shape
        per = self.n_points // self.points_per_query  # queries per lane
        lanes = nq // per
        pooled = q.reshape(s, lanes, per, c).mean(axis=2)
        scores = self.cls(pooled)
        unit = ad.sigmoid(self.reg(q)).reshape(s, lanes, self.n_points, 3)
        return Prediction3D(scores, unit, q, tuple(bev_range))


class Lane3DDecoder:
    """Initialises 3D queries (prior2d / random / mixed) and runs the 3D decoder.

    With ``query_type='instance'`` each lane's N_P point rows are fused into a
    single instance query that regresses all points at once.
    """

    def __init__(self, store, cfg, rng, name="lane3d"):
        self.cfg = cfg
        c, npt, ni, nl = cfg.dim, cfg.n_points, cfg.scene.n_cameras, cfg.n_lanes
        self.depths = cfg.depth_values()
        self.pe_mlp = MLP(store, f"{name}.pe_mlp", (3 * len(self.depths), c, c), rng)
        n_layers = cfg.layers_3d
        if cfg.init_mode != "prior2d":
            n_rand = nl if cfg.init_mode == "random" else nl - nl // 2
            self.q_rand = store.add(f"{name}.random_queries", rng.normal(0, 1, (ni, n_rand * npt, c)))
            self.p_rand = store.add(f"{name}.random_position", rng.normal(0, 1, (ni, n_rand * npt, c)))
        if cfg.query_type == "instance":
            self.fuse = MLP(store, f"{name}.instance_fuse", (npt * c, c, c), rng)
            per_query = npt
        else:
            per_query = 1
        self.layers = [DecoderLayer3D(store, f"{name}.layers.{i}", cfg, rng) for i in range(n_layers)]
        self.head = LaneHead3D(store, f"{name}.head", c, cfg.scene.num_lane_classes, per_query, npt, rng)
        self.key_pe = key_position_embedding(
            [cfg.scene.level_shapes()[i] for i in cfg.key_level_indices()], ni, c) if cfg.key_pe else None

    def init_queries(self, q2d, points2d, image_size, lift_m, lift_c, n_scenes):
        """Build :class:`LaneQuerySet3D`.

        ``q2d`` (S*N_I, N_L*N_P, C) final 2D queries and ``points2d``
        (S*N_I, N_L, N_P, 2) final 2D points, or ``None`` in random mode.
        """
        cfg = self.cfg
        c, npt, ni, nl = cfg.dim, cfg.n_points, cfg.scene.n_cameras, cfg.n_lanes
        s = n_scenes
        if cfg.init_mode == "random":
            ones = np.ones((s, 1, 1, 1), dtype=self.q_rand.dtype)
            q = (self.q_rand.reshape(1, ni, nl * npt, c) * ones).reshape(s, ni * nl * npt, c)
            p = (self.p_rand.reshape(1, ni, nl * npt, c) * ones).reshape(s, ni * nl * npt, c)
            prov = np.stack([np.full(ni * nl, -1), np.arange(ni * nl)], axis=1)
            return LaneQuerySet3D(q, p, prov)
        if cfg.detach_2d:
            q2d, points2d = q2d.detach(), points2d.detach()
        q = q2d.reshape(s, ni * nl * npt, c)
        pts = points2d.reshape(s, ni, nl * npt, 2)
        p = build_3d_pe(pts, image_size, lift_m, lift_c, self.depths, cfg.bev_range, self.pe_mlp)
        cams, inst = np.meshgrid(np.arange(ni), np.arange(nl), indexing="ij")
        prov = np.stack([cams.ravel(), inst.ravel()], axis=1)
        if cfg.init_mode == "mixed":
            keep = nl // 2
            ones = np.ones((s, 1, 1, 1), dtype=q.dtype)
            q_r = self.q_rand.reshape(1, ni, -1, c) * ones
            p_r = self.p_rand.reshape(1, ni, -1, c) * ones
            q = ad.concat([q.reshape(s, ni, nl * npt, c)[:, :, :keep * npt], q_r], axis=2)
            p = ad.concat([p.reshape(s, ni, nl * npt, c)[:, :, :keep * npt], p_r], axis=2)
            q = q.reshape(s, ni * nl * npt, c)
            p = p.reshape(s, ni * nl * npt, c)
            prov = prov.copy()
            prov[prov[:, 1] >= keep, 0] = -1
        return LaneQuerySet3D(q, p, prov)

    def __call__(self, queryset, keys):
        """keys (S, K, C): every camera's flattened multi-level features."""
        cfg = self.cfg
        q, p = queryset.appearance, queryset.position
        if cfg.query_type == "instance":
            s, nq, c = q.shape
            lanes = nq // cfg.n_points
            q = self.fuse(q.reshape(s, lanes, cfg.n_points * c))
            p = p.reshape(s, lanes, cfg.n_points, c).mean(axis=2)
        key_pe = None if self.key_pe is None else self.key_pe.astype(keys.dtype)
        preds = []
        for layer in self.layers:
            q = layer(q, p, keys, key_pe)
            preds.append(self.head(q, cfg.bev_range))
        return preds
