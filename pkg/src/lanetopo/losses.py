"""Matching costs and the training losses for lanes, traffic elements and topology."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import box_giou, cxcywh_to_xyxy
from .matching import MatchResult, hungarian


def _log_sigmoid(z):
    return -(np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z))))


def focal_terms(logits, targets, alpha=0.25, gamma=2.0):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-z))
    log_p = _log_sigmoid(z)
    log_q = _log_sigmoid(-z)
    pos = alpha * (1 - p) ** gamma
    neg = (1 - alpha) * p ** gamma
    loss = t * (-pos * log_p) + (1 - t) * (-neg * log_q)
    grad = t * pos * (gamma * p * log_p - (1 - p)) + (1 - t) * neg * (p - gamma * (1 - p) * log_q)
    return loss, grad


def focal_loss(logits, targets, alpha=0.25, gamma=2.0, weights=None, denominator=None):
    """Sigmoid focal loss, reduced as ``sum(weights * loss) / denominator``.

    Without ``weights`` every element has weight 1; without ``denominator``
    the weighted sum is divided by the number of elements.
    """
    logits = ad.as_tensor(logits)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape)
    loss, grad = focal_terms(logits.data, targets, alpha, gamma)
    w = np.ones(logits.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), logits.shape)
    denom = float(logits.size if denominator is None else denominator)
    value = float((w * loss).sum()) / denom

    def backward(g):
        return ((g * w * grad / denom).astype(logits.dtype),)

    return ad._make(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def focal_cost(logits, gt_classes, alpha=0.25, gamma=2.0):
    """Classification matching cost (n_pred, n_gt): positive minus negative focal term."""
    z = np.asarray(logits, dtype=np.float64)[:, np.asarray(gt_classes, dtype=np.int64)]
    p = 1.0 / (1.0 + np.exp(-z))
    pos = -alpha * (1 - p) ** gamma * _log_sigmoid(z)
    neg = -(1 - alpha) * p ** gamma * _log_sigmoid(-z)
    return pos - neg


def point_l1(pred, gt):
    """Mean over points of the per-point L1 norm: (n, P, d) x (m, P, d) -> (n, m)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return np.abs(pred[:, None] - gt[None]).sum(-1).mean(-1)


def lane_match_cost(logits, points, gt_classes, gt_points, w_cls=2.0, w_reg=5.0, alpha=0.25, gamma=2.0):
    """Matching cost between predicted and GT lanes; point order is kept fixed."""
    return w_cls * focal_cost(logits, gt_classes, alpha, gamma) + w_reg * point_l1(points, gt_points)


def te_match_cost(logits, boxes, gt_classes, gt_boxes, w_cls=2.0, w_reg=5.0, w_giou=2.0, alpha=0.25, gamma=2.0):
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    l1 = np.abs(boxes[:, None] - gt_boxes[None]).sum(-1)
    giou = box_giou(cxcywh_to_xyxy(boxes)[:, None], cxcywh_to_xyxy(gt_boxes)[None])
    return w_cls * focal_cost(logits, gt_classes, alpha, gamma) + w_reg * l1 - w_giou * giou


def giou_tensor(pred, gt):
    """GIoU of predicted cxcywh boxes (tensor, (M, 4)) against constant GT boxes."""
    gt = np.asarray(gt, dtype=pred.dtype)
    cx, cy, w, h = (pred[:, i] for i in range(4))
    x1, y1, x2, y2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    g = cxcywh_to_xyxy(gt).astype(pred.dtype)
    gx1, gy1, gx2, gy2 = (g[:, i] for i in range(4))
    iw = ad.relu(ad.minimum(x2, gx2) - ad.maximum(x1, gx1))
    ih = ad.relu(ad.minimum(y2, gy2) - ad.maximum(y1, gy1))
    inter = iw * ih
    union = w * h + (gx2 - gx1) * (gy2 - gy1) - inter
    enclose = (ad.maximum(x2, gx2) - ad.minimum(x1, gx1)) * (ad.maximum(y2, gy2) - ad.minimum(y1, gy1))
    return inter / union - (enclose - union) / enclose


def edge_direction_terms(pred, gt, eps=1e-9):
    """Per-segment (1 - cosine) between consecutive-point differences and a validity mask.

    ``pred`` is a tensor (M, P, d), ``gt`` an array (M, P, d). Segments where
    either difference has zero length are invalid.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    dp = pred[:, 1:] - pred[:, :-1]
    dg = gt[:, 1:] - gt[:, :-1]
    ng = np.sqrt((dg * dg).sum(-1))
    npd = np.sqrt((dp.data * dp.data).sum(-1))
    valid = (ng > eps) & (npd > eps)
    norm_p = ad.sqrt((dp * dp).sum(axis=-1) + np.where(valid, 0.0, 1.0).astype(pred.dtype))
    cos = (dp * dg).sum(axis=-1) / (norm_p * np.where(valid, ng, 1.0).astype(pred.dtype))
    return 1.0 - cos, valid


def edge_direction_loss(pred, gt):
    """Mean (1 - cos) over valid segments of matched polylines."""
    pred = ad.as_tensor(pred)
    terms, valid = edge_direction_terms(pred, gt)
    n = int(valid.sum())
    if n == 0:
        return ad.Tensor(np.zeros((), dtype=pred.dtype))
    return (terms * valid.astype(pred.dtype)).sum() * (1.0 / n)


@dataclass
class LossBreakdown:
    lane2d: ad.Tensor
    lane3d: ad.Tensor
    te: ad.Tensor
    topo_ll: ad.Tensor
    topo_lt: ad.Tensor
    direction: ad.Tensor
    total: ad.Tensor

    def as_dict(self):
        return {k: float(getattr(self, k).data) for k in
                ("lane2d", "lane3d", "te", "topo_ll", "topo_lt", "direction", "total")}


def _zero(dtype):
    return ad.Tensor(np.zeros((), dtype=dtype))


def set_loss(scores, coords, gts, norm, cost_fn, w_cls, w_reg, alpha, gamma, w_giou=0.0):
    """Hungarian-matched set loss over a batch.

    ``scores`` (B, N, K+1) logits; ``coords`` (B, N, ...) tensor; ``gts[b]``
    is ``(classes, coords)``; ``norm[b]`` divides every term of element b.
    Returns (classification, regression, giou, matches, gathered pred, gathered GT, batch ids).
    """
    b, n, k1 = scores.shape
    targets = np.zeros((b, n, k1))
    targets[..., k1 - 1] = 1.0
    sel_b, sel_p, sel_g, matches = [], [], [], []
    for i in range(b):
        cls, pts = gts[i]
        if len(cls) == 0:
            matches.append(MatchResult([], list(range(n))))
            continue
        cost = cost_fn(scores.data[i], coords.data[i], cls, pts)
        mr = hungarian(cost)
        matches.append(mr)
        p, g = mr.pred_indices, mr.gt_indices
        targets[i, p, k1 - 1] = 0.0
        targets[i, p, np.asarray(cls)[g]] = 1.0
        sel_b.append(np.full(len(p), i))
        sel_p.append(p)
        sel_g.append(np.asarray(pts)[g])
    w = (1.0 / np.asarray(norm, dtype=np.float64)).reshape(b, 1, 1)
    cls_loss = focal_loss(scores, targets, alpha, gamma, weights=w, denominator=1.0) * w_cls
    if not sel_b:
        z = _zero(scores.dtype)
        return cls_loss, z, z, matches, None, None, np.zeros(0, dtype=np.int64)
    bi = np.concatenate(sel_b)
    pi = np.concatenate(sel_p)
    gt = np.concatenate(sel_g).astype(coords.dtype)
    pred = coords[(bi, pi)]
    wsel = (1.0 / np.asarray(norm, dtype=np.float64))[bi].astype(coords.dtype)
    diff = ad.absolute(pred - gt)
    if diff.ndim == 3:  # lanes: (M, P, d) -> per-point L1 averaged over points
        per = diff.sum(axis=-1).mean(axis=-1)
    else:  # boxes: (M, 4)
        per = diff.sum(axis=-1)
    reg_loss = (per * wsel).sum() * w_reg
    giou_loss = _zero(scores.dtype)
    if w_giou:
        giou_loss = ((1.0 - giou_tensor(pred, gt)) * wsel).sum() * w_giou
    return cls_loss, reg_loss, giou_loss, matches, pred, gt, bi


def topology_focal(logits, gt, alpha=0.25, gamma=2.0):
    """Focal loss over (S, m, n) logits, normalised by positives per scene, averaged over scenes."""
    s = logits.shape[0]
    pos = np.asarray(gt).reshape(s, -1).sum(-1)
    w = (1.0 / (s * np.maximum(1.0, pos))).reshape(s, 1, 1)
    return focal_loss(logits, gt, alpha, gamma, weights=w, denominator=1.0)
