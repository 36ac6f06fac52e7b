"""End-to-end pipeline: input projection, 2D lanes, 3D lanes, traffic elements, topology."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig, bev_normalize
from .geometry import resample_equidistant
from .lane2d import Lane2DDecoder
from .lane3d import Lane3DDecoder
from .losses import (LossBreakdown, edge_direction_terms, lane_match_cost, set_loss, te_match_cost,
                     topology_focal)
from .nn import MLP
from .topology import TopologyHead, normalized_view_matrix, pool_instance_queries, topology_gt_transfer
from .traffic import TEDetector


@dataclass
class SceneBatch:
    """Stacked inputs and targets for ``S`` scenes; 2D items are ordered (scene, camera)."""

    scene_ids: list
    inputs: list  # per level: (S*N_I, H*W, C_in)
    lift_m: np.ndarray  # (S, N_I, 3, 3)
    lift_c: np.ndarray  # (S, N_I, 3)
    view_matrix: np.ndarray  # (S, 12)
    image_size: tuple
    gt2d: list = field(default_factory=list)  # per (scene, camera): (classes, (m, N_P, 2))
    gt3d: list = field(default_factory=list)  # per scene: (classes, (m, N_P, 3) BEV-normalised)
    gt_te: list = field(default_factory=list)  # per scene: (classes, (t, 4))
    adjacency: list = field(default_factory=list)
    lane_te: list = field(default_factory=list)

    @property
    def n_scenes(self):
        return len(self.scene_ids)


def lane_gt_points(scene, n_points):
    """GT centrelines resampled to ``n_points`` equally spaced points, (l, N_P, 3) metres."""
    if not scene.lanes3d:
        return np.zeros((0, n_points, 3))
    return np.stack([resample_equidistant(l, n_points) for l in scene.lanes3d])


def make_batch(scenes, cfg: RunConfig):
    sc = cfg.scene
    ni = sc.n_cameras
    inputs = []
    for lv in range(sc.levels):
        maps = [scene.features[c][lv] for scene in scenes for c in range(ni)]
        inputs.append(np.stack([m.reshape(m.shape[0], -1).T for m in maps]).astype(np.float32)
                      if maps else np.zeros((0, 1, sc.c_in), np.float32))
    lifts = [[cam.lift_affine() for cam in scene.cameras] for scene in scenes]
    lift_m = np.array([[m for m, _ in row] for row in lifts]).reshape(len(scenes), ni, 3, 3)
    lift_c = np.array([[c for _, c in row] for row in lifts]).reshape(len(scenes), ni, 3)
    image_size = tuple(sc.image_size)
    view = np.array([normalized_view_matrix(s.cameras[0].projection_matrix(), image_size) for s in scenes])
    batch = SceneBatch([s.scene_id for s in scenes], inputs, lift_m, lift_c, view.reshape(-1, 12), image_size)
    npt = cfg.n_points
    for scene in scenes:
        for cam_gt in scene.lanes2d_gt:
            cls = np.array([g.class_id for g in cam_gt], dtype=np.int64)
            pts = np.array([g.points for g in cam_gt]).reshape(-1, npt, 2)
            batch.gt2d.append((cls, pts))
        unit = bev_normalize(lane_gt_points(scene, npt), cfg.bev_range)
        batch.gt3d.append((np.asarray(scene.lane_classes, dtype=np.int64), unit))
        batch.gt_te.append((np.asarray(scene.te_classes, dtype=np.int64),
                            np.asarray(scene.te_boxes, dtype=np.float64).reshape(-1, 4)))
        batch.adjacency.append(np.asarray(scene.lane_adjacency, dtype=bool))
        batch.lane_te.append(np.asarray(scene.lane_te, dtype=bool).reshape(scene.n_lanes, len(scene.te_classes)))
    return batch


@dataclass
class PipelineOutput:
    lane2d: list  # Prediction2D per layer (empty when the 2D stage is skipped)
    lane3d: list  # Prediction3D per layer
    te: list  # TEPrediction per layer
    queries3d: object  # LaneQuerySet3D fed to the 3D decoder
    topo_ll: ad.Tensor | None = None  # (S, l, l) logits
    topo_lt: ad.Tensor | None = None  # (S, l, N_T) logits


class TopoPipeline:
    def __init__(self, cfg: RunConfig, seed=None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.store = ad.ParameterStore()
        sc = cfg.scene
        self.input_proj = [MLP(self.store, f"input_proj.{v}", (sc.c_in, cfg.dim, cfg.dim), rng)
                           for v in range(sc.levels)]
        self.run_2d = not (cfg.init_mode == "random" and cfg.skip_2d_when_random)
        self.lane2d = Lane2DDecoder(self.store, cfg, rng) if self.run_2d else None
        self.lane3d = Lane3DDecoder(self.store, cfg, rng)
        self.te = TEDetector(self.store, cfg, rng)
        self.topology = TopologyHead(self.store, cfg, rng) if cfg.use_topology else None

    @property
    def params(self):
        return self.store.params

    def forward(self, batch: SceneBatch) -> PipelineOutput:
        cfg = self.cfg
        sc = cfg.scene
        ni, s = sc.n_cameras, batch.n_scenes
        shapes = sc.level_shapes()
        vals = [proj(ad.Tensor(x.astype(ad.default_dtype()))) for proj, x in zip(self.input_proj, batch.inputs)]
        out2d = self.lane2d(vals, shapes) if self.run_2d else []
        te_preds = self.te([v[::ni] for v in vals], shapes)
        keys = ad.concat([vals[i] for i in cfg.key_level_indices()], axis=1).reshape(s, -1, cfg.dim)
        if out2d:
            last = out2d[-1]
            qs = self.lane3d.init_queries(last.query, last.points, batch.image_size,
                                          batch.lift_m, batch.lift_c, s)
        else:
            qs = self.lane3d.init_queries(None, None, batch.image_size, batch.lift_m, batch.lift_c, s)
        preds3d = self.lane3d(qs, keys)
        out = PipelineOutput(out2d, preds3d, te_preds, qs)
        if self.topology is not None:
            final = preds3d[-1]
            per_query = 1 if cfg.query_type == "instance" else cfg.n_points
            q3 = pool_instance_queries(final.query, per_query)
            q2 = prov2d = None
            if out2d and cfg.topo_use_2d:
                q2 = pool_instance_queries(out2d[-1].query, cfg.n_points).reshape(s, ni * cfg.n_lanes, cfg.dim)
                cams, inst = np.meshgrid(np.arange(ni), np.arange(cfg.n_lanes), indexing="ij")
                prov2d = np.stack([cams.ravel(), inst.ravel()], axis=1)
            q_l = self.topology.fuse(q3, q2, qs.provenance if q2 is not None else None, prov2d)
            out.topo_ll = self.topology.predict_ll(q_l, final.unit_points)
            out.topo_lt = self.topology.predict_lt(q_l, batch.view_matrix, te_preds[-1].query)
        return out

    __call__ = forward


def compute_loss(out: PipelineOutput, batch: SceneBatch, cfg: RunConfig):
    """Deep-supervised loss over all stages; returns (LossBreakdown, final-layer matches)."""
    s = batch.n_scenes
    ni = cfg.scene.n_cameras
    a, g = cfg.focal_alpha, cfg.focal_gamma
    dtype = ad.default_dtype()
    zero = ad.Tensor(np.zeros((), dtype=dtype))

    def lane_cost(logits, pts, cls, gpts):
        return lane_match_cost(logits, pts, cls, gpts, cfg.w_cls, cfg.w_reg, a, g)

    def te_cost(logits, boxes, cls, gboxes):
        return te_match_cost(logits, boxes, cls, gboxes, cfg.w_te_cls, cfg.w_te_reg, cfg.w_te_giou, a, g)

    l2d, ldir = zero, zero
    if out.lane2d:
        per_scene = np.array([sum(len(batch.gt2d[i * ni + c][0]) for c in range(ni)) for i in range(s)])
        norm2d = np.repeat(s * np.maximum(1, per_scene), ni)
        for pred in out.lane2d:
            cls_l, reg_l, _, _, mp, mg, bi = set_loss(pred.scores, pred.points, batch.gt2d, norm2d, lane_cost,
                                                      cfg.w_cls, cfg.w_reg, a, g)
            l2d = l2d + cls_l + reg_l
            if cfg.use_dir_loss and mp is not None:
                terms, valid = edge_direction_terms(mp, mg)
                scene_of = bi // ni
                counts = np.bincount(scene_of, weights=valid.sum(-1), minlength=s)
                w = valid / (s * np.maximum(1.0, counts[scene_of]))[:, None]
                ldir = ldir + (terms * w.astype(dtype)).sum()
    norm3d = s * np.maximum(1, [len(c) for c, _ in batch.gt3d])
    l3d = zero
    match3d = None
    for pred in out.lane3d:
        cls_l, reg_l, _, match3d, *_ = set_loss(pred.scores, pred.unit_points, batch.gt3d, norm3d, lane_cost,
                                                cfg.w_cls, cfg.w_reg, a, g)
        l3d = l3d + cls_l + reg_l
    norm_te = s * np.maximum(1, [len(c) for c, _ in batch.gt_te])
    lte = zero
    match_te = None
    for pred in out.te:
        cls_l, reg_l, giou_l, match_te, *_ = set_loss(pred.scores, pred.boxes, batch.gt_te, norm_te, te_cost,
                                                      cfg.w_te_cls, cfg.w_te_reg, a, g, w_giou=cfg.w_te_giou)
        lte = lte + cls_l + reg_l + giou_l
    ll, lt = zero, zero
    if out.topo_ll is not None:
        n3 = out.topo_ll.shape[1]
        nt = out.topo_lt.shape[2]
        rows = [m.pred_to_gt(n3) for m in match3d]
        cols = [m.pred_to_gt(nt) for m in match_te]
        gt_ll = np.stack([topology_gt_transfer(r, r, adj) for r, adj in zip(rows, batch.adjacency)])
        gt_lt = np.stack([topology_gt_transfer(r, c, lte_) for r, c, lte_ in zip(rows, cols, batch.lane_te)])
        ll = topology_focal(out.topo_ll, gt_ll, a, g)
        lt = topology_focal(out.topo_lt, gt_lt, a, g)
    total = l2d + l3d + lte + ll * cfg.w_topo_ll + lt * cfg.w_topo_lt
    if cfg.use_dir_loss:
        total = total + ldir * cfg.w_dir
    return LossBreakdown(l2d, l3d, lte, ll, lt, ldir, total), {"lane3d": match3d, "te": match_te}
