"""Lane-lane and lane-TE topology heads and GT transfer through the matchings."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import LaneTopoError
from .nn import MLP, Linear


def pool_instance_queries(q, n_points):
    """Mean over each instance's point rows: (B, l*N_P, C) -> (B, l, C)."""
    b, nq, c = q.shape
    return q.reshape(b, nq // n_points, n_points, c).mean(axis=2)


def normalized_view_matrix(projection, image_size):
    """First three rows of a padded 4x4 projection, with the pixel rows scaled to [0, 1]."""
    h, w = image_size
    m = np.array(projection, dtype=np.float64)[..., :3, :].copy()
    m[..., 0, :] /= w
    m[..., 1, :] /= h
    return m.reshape(*m.shape[:-2], 12)


class PairMLP:
    """Three-layer MLP on ``concat(a_m, b_n)`` for every pair (m, n).

    The first layer's weight is one (2C, C) matrix; it is applied as two
    halves so the (m, n) grid is formed after the first matrix product.
    """

    def __init__(self, store, name, dim, rng):
        self.dim = dim
        self.w1 = store.add(f"{name}.0.weight", ad.xavier_uniform(rng, 2 * dim, dim))
        self.b1 = store.add(f"{name}.0.bias", np.zeros(dim))
        self.l2 = Linear(store, f"{name}.1", dim, dim, rng)
        self.l3 = Linear(store, f"{name}.2", dim, 1, rng)

    def __call__(self, a, b):
        s, m, c = a.shape
        n = b.shape[1]
        u = a @ self.w1[:c]
        v = b @ self.w1[c:]
        h = ad.relu(u.reshape(s, m, 1, c) + v.reshape(s, 1, n, c) + self.b1)
        h = ad.relu(self.l2(h))
        return self.l3(h).reshape(s, m, n)


class TopologyHead:
    def __init__(self, store, cfg, rng, name="topology"):
        self.cfg = cfg
        c = cfg.dim
        dims = (c, c, c, c)
        self.mlp_a = MLP(store, f"{name}.mlp_3d", dims, rng)
        self.mlp_b = MLP(store, f"{name}.mlp_2d", dims, rng)
        self.coord_mlp = MLP(store, f"{name}.coord_mlp", (cfg.n_points * 3, c, c, c), rng)
        self.proj_mlp = MLP(store, f"{name}.proj_mlp", (12, c, c, c), rng)
        self.te_mlp = MLP(store, f"{name}.te_mlp", dims, rng)
        self.ll = PairMLP(store, f"{name}.ll", c, rng)
        self.lt = PairMLP(store, f"{name}.lt", c, rng)

    def fuse(self, q3d_bar, q2d_bar=None, prov3d=None, prov2d=None):
        """Q^L = MLP_a(Q3d) + MLP_b(Q2d); rows whose 3D query has no 2D source get no 2D term."""
        out = self.mlp_a(q3d_bar)
        if q2d_bar is None or not self.cfg.topo_use_2d:
            return out
        if prov3d is not None and prov2d is not None:
            prov3d = np.asarray(prov3d)
            prov2d = np.asarray(prov2d)
            src = prov3d[:, 0] >= 0
            if prov3d.shape != prov2d.shape or np.any(prov3d[src] != prov2d[src]):
                raise LaneTopoError("2D and 3D pooled queries are not aligned instance by instance")
            if not src.all():
                mask = src.astype(out.dtype).reshape(1, -1, 1)
                return out + self.mlp_b(q2d_bar) * mask
        return out + self.mlp_b(q2d_bar)

    def predict_ll(self, q_l, unit_points):
        """Directed lane-lane logits (S, l, l); ``unit_points`` (S, l, N_P, 3)."""
        s, l = unit_points.shape[:2]
        emb = self.coord_mlp(unit_points.reshape(s, l, -1))
        a = q_l + emb
        return self.ll(a, a)

    def predict_lt(self, q_l, view_matrix, te_query):
        """Lane-TE logits (S, l, t); ``view_matrix`` (S, 12) normalised front projection."""
        s = q_l.shape[0]
        a = q_l
        if self.cfg.topo_use_proj:
            h = self.proj_mlp(ad.Tensor(np.asarray(view_matrix, dtype=q_l.dtype)))
            a = q_l + h.reshape(s, 1, -1)
        return self.lt(a, self.te_mlp(te_query))


def topology_gt_transfer(rows_to_gt, cols_to_gt, gt_adjacency):
    """Relabel a GT relation onto prediction indices.

    ``rows_to_gt[m]`` is the GT index matched to prediction m (or -1);
    likewise ``cols_to_gt``. Entry (m, n) is 1 iff both are matched and the
    matched GT pair is related.
    """
    r = np.asarray(rows_to_gt, dtype=np.int64)
    c = np.asarray(cols_to_gt, dtype=np.int64)
    adj = np.asarray(gt_adjacency, dtype=bool)
    out = np.zeros((len(r), len(c)))
    rm, cm = r >= 0, c >= 0
    if rm.any() and cm.any():
        out[np.ix_(rm, cm)] = adj[np.ix_(r[rm], c[cm])]
    return out
