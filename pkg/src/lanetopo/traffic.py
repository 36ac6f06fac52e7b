"""Front-view traffic element detector (DETR-style boxes with deformable attention)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .lane2d import DecoderLayer2D, position_embedding_2d
from .nn import Linear


@dataclass
class TEPrediction:
    scores: ad.Tensor  # (S, N_T, num_te_classes + 1) logits
    boxes: ad.Tensor  # (S, N_T, 4) normalised cxcywh
    query: ad.Tensor  # (S, N_T, C)


class TEDetector:
    def __init__(self, store, cfg, rng, name="te"):
        self.cfg = cfg
        c, nt = cfg.dim, cfg.n_te
        self.queries = store.add(f"{name}.queries", rng.normal(0, 1, (nt, c)))
        seed = rng.uniform(0.1, 0.9, (nt, 2))
        self.ref_seed = store.add(f"{name}.reference_seed", np.log(seed / (1 - seed)))
        self.layers = [DecoderLayer2D(store, f"{name}.layers.{i}", cfg, rng) for i in range(cfg.layers_te)]
        self.cls = Linear(store, f"{name}.head.cls", c, cfg.scene.num_te_classes + 1, rng)
        self.box = Linear(store, f"{name}.head.box", c, 4, rng)

    def head(self, q):
        return TEPrediction(self.cls(q), ad.sigmoid(self.box(q)), q)

    def __call__(self, values, shapes):
        """``values[v]`` (S, H_v*W_v, C): front-camera features. One prediction per layer."""
        b = values[0].shape[0]
        ones = np.ones((b, 1, 1), dtype=self.queries.dtype)
        q = self.queries.reshape(1, *self.queries.shape) * ones
        ref_t = ad.sigmoid(self.ref_seed)
        ref = ref_t.reshape(1, *ref_t.shape) * ones
        preds = []
        for layer in self.layers:
            pos = ad.Tensor(position_embedding_2d(ref.data, self.cfg.dim).astype(q.dtype))
            q = layer(q, pos, ref, values, shapes)
            pred = self.head(q)
            preds.append(pred)
            ref = ad.Tensor(pred.boxes.data[..., :2].copy())
        return preds
