"""Benchmark metrics: lane/TE mAP, topology mAP, OLS, OpenLane F-Score and recall."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, DomainError
from .geometry import box_iou, chamfer_distance, cxcywh_to_xyxy, frechet_distance, resample_equidistant
from .matching import hungarian

FRECHET_THRESHOLDS = (1.0, 2.0, 3.0)
CHAMFER_THRESHOLDS = (0.5, 1.0, 1.5)
TE_IOU_THRESHOLD = 0.75
TOP_LANE_FRECHET = 1.0
TOP_TE_IOU = 0.5
EVAL_POINTS = 11
FSCORE_DIST = 1.5
FSCORE_RATIO = 0.75
NEAR_FAR_SPLIT = 40.0


# -- average precision ---------------------------------------------------------

def greedy_assign(scores, quality, ok):
    """Score-ordered greedy one-to-one assignment.

    Each prediction, in descending score order (ties by input order), claims
    the unclaimed GT with the highest ``quality`` among those where ``ok``.
    Returns ``pred_to_gt`` with -1 for unassigned predictions.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    out = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return out
    quality = np.asarray(quality, dtype=np.float64).reshape(n, -1)
    ok = np.asarray(ok, dtype=bool).reshape(n, -1)
    claimed = np.zeros(quality.shape[1], dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        cand = ok[i] & ~claimed
        if cand.any():
            j = int(np.argmax(np.where(cand, quality[i], -np.inf)))
            out[i] = j
            claimed[j] = True
    return out


def ap_from_tp(scores, tp, n_gt):
    """All-point interpolated AP of a ranked list of TP flags against ``n_gt`` positives."""
    if n_gt <= 0:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = tp[order].astype(np.float64)
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(scores, quality, ok):
    """AP of one prediction set against one GT set under predicate ``ok``."""
    n_gt = np.asarray(ok).shape[1] if np.asarray(ok).ndim == 2 else 0
    assign = greedy_assign(scores, quality, ok)
    return ap_from_tp(scores, assign >= 0, n_gt)


# -- lane / TE detection mAP --------------------------------------------------------

def _resampled(points, n=EVAL_POINTS):
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2 or not np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() > 0:
        return np.repeat(pts[:1], n, axis=0)
    return resample_equidistant(pts, n)


def pairwise_lane_distance(preds, gts, kind="frechet"):
    """(n, m) distances between lists of polylines after resampling to a common count."""
    fn = frechet_distance if kind == "frechet" else chamfer_distance
    a = [_resampled(p) for p in preds]
    b = [_resampled(g) for g in gts]
    out = np.zeros((len(a), len(b)))
    for i, p in enumerate(a):
        for j, g in enumerate(b):
            out[i, j] = fn(p, g)
    return out


@dataclass
class _Item:
    scores: np.ndarray
    classes: np.ndarray
    gt_classes: np.ndarray
    dist: np.ndarray  # (n, m) distance (lanes) or negated IoU (TEs)


def _class_ap(items, thresholds, higher_is_better=False):
    """Mean over GT-present classes of the mean AP over thresholds, pooled across scenes."""
    present = sorted({int(c) for it in items for c in it.gt_classes})
    if not present:
        return 0.0
    per_class = []
    for c in present:
        aps = []
        for thr in thresholds:
            all_scores, all_tp, n_gt = [], [], 0
            for it in items:
                pm = it.classes == c
                gm = it.gt_classes == c
                n_gt += int(gm.sum())
                if not pm.any():
                    continue
                d = it.dist[np.ix_(pm, gm)]
                if higher_is_better:
                    ok, quality = d >= thr, d
                else:
                    ok, quality = d <= thr, -d
                assign = greedy_assign(it.scores[pm], quality, ok)
                all_scores.append(it.scores[pm])
                all_tp.append(assign >= 0)
            if all_scores:
                aps.append(ap_from_tp(np.concatenate(all_scores), np.concatenate(all_tp), n_gt))
            else:
                aps.append(0.0)
        per_class.append(float(np.mean(aps)))
    return float(np.mean(per_class))


def _lane_items(pred_scenes, gt_scenes, kind):
    items = []
    for pred, gt in zip(pred_scenes, gt_scenes):
        dist = pairwise_lane_distance(pred["points"], gt["points"], kind)
        items.append(_Item(np.asarray(pred["scores"], float), np.asarray(pred["classes"], int),
                           np.asarray(gt["classes"], int), dist.reshape(len(pred["points"]), len(gt["points"]))))
    return items


def det_l(pred_scenes, gt_scenes, thresholds=FRECHET_THRESHOLDS):
    """Fréchet mAP. Each scene is a dict with ``points`` (list of (n, 3)), ``scores``, ``classes``."""
    return _class_ap(_lane_items(pred_scenes, gt_scenes, "frechet"), thresholds)


def det_l_chamfer(pred_scenes, gt_scenes, thresholds=CHAMFER_THRESHOLDS):
    return _class_ap(_lane_items(pred_scenes, gt_scenes, "chamfer"), thresholds)


def _te_iou(pred_boxes, gt_boxes):
    a = cxcywh_to_xyxy(np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))
    return box_iou(a[:, None], b[None]).reshape(len(a), len(b))


def det_t(pred_scenes, gt_scenes, iou_threshold=TE_IOU_THRESHOLD):
    """IoU mAP over TE categories. Scenes are dicts with ``boxes`` (cxcywh), ``scores``, ``classes``."""
    items = []
    for pred, gt in zip(pred_scenes, gt_scenes):
        iou = _te_iou(pred["boxes"], gt["boxes"])
        items.append(_Item(np.asarray(pred["scores"], float), np.asarray(pred["classes"], int),
                           np.asarray(gt["classes"], int), iou))
    return _class_ap(items, (iou_threshold,), higher_is_better=True)


# -- topology ---------------------------------------------------------------

def top_metric(pred_adj, row_match, col_match, gt_adj):
    """Per-vertex topology APs for one scene (returned as a list to be pooled).

    ``pred_adj`` (n_rows, n_cols) edge scores; ``row_match``/``col_match``
    map prediction indices to GT indices (-1 when unmatched); ``gt_adj``
    (m_rows, m_cols) GT relation. For each matched GT row vertex with at
    least one GT edge, predicted edges with positive score are ranked and an
    edge is a TP iff its column is matched to a GT column related to the
    vertex. Missing GT edges count as unrecoverable false negatives.
    """
    pred_adj = np.asarray(pred_adj, dtype=np.float64)
    gt_adj = np.asarray(gt_adj, dtype=bool)
    row_match = np.asarray(row_match, dtype=np.int64)
    col_match = np.asarray(col_match, dtype=np.int64)
    aps = []
    for p, g in enumerate(row_match):
        if g < 0:
            continue
        n_pos = int(gt_adj[g].sum())
        if n_pos == 0:
            continue
        scores = pred_adj[p]
        keep = scores > 0
        cm = col_match[keep]
        tp = np.zeros(len(cm), dtype=bool)
        valid = cm >= 0
        tp[valid] = gt_adj[g, cm[valid]]
        aps.append(ap_from_tp(scores[keep], tp, n_pos))
    return aps


def lane_instance_match(pred_points, pred_scores, gt_points, threshold=TOP_LANE_FRECHET):
    dist = pairwise_lane_distance(pred_points, gt_points, "frechet").reshape(len(pred_points), len(gt_points))
    return greedy_assign(pred_scores, -dist, dist <= threshold)


def te_instance_match(pred_boxes, pred_scores, gt_boxes, threshold=TOP_TE_IOU):
    iou = _te_iou(pred_boxes, gt_boxes)
    return greedy_assign(pred_scores, iou, iou >= threshold)


def ols(det_l_value, det_t_value, top_ll, top_lt):
    """Overall score: mean of the detection mAPs and square-rooted topology mAPs."""
    vals = (det_l_value, det_t_value, top_ll, top_lt)
    for v in vals:
        if not (0.0 <= v <= 1.0) or math.isnan(v):
            raise DomainError(f"score components must lie in [0, 1], got {v}")
    return 0.25 * (det_l_value + det_t_value + math.sqrt(top_ll) + math.sqrt(top_lt))


# -- OpenLane F-Score -----------------------------------------------------------

def _fscore_scene(pred_pts, pred_scores, pred_cls, gt_pts, gt_cls):
    """Per cutoff (own unique scores, descending): TP count, predictions kept, and TP pair data."""
    n, m = len(pred_pts), len(gt_pts)
    p = np.array([_resampled(x) for x in pred_pts]).reshape(n, EVAL_POINTS, 3)
    g = np.array([_resampled(x) for x in gt_pts]).reshape(m, EVAL_POINTS, 3)
    d = np.linalg.norm(p[:, None] - g[None], axis=-1) if n and m else np.zeros((n, m, EVAL_POINTS))
    cost = np.sqrt((d ** 2).sum(-1))
    close = (d <= FSCORE_DIST).mean(-1) >= FSCORE_RATIO
    cutoffs = np.unique(pred_scores)[::-1]
    out = []
    for c in cutoffs:
        keep = np.nonzero(pred_scores >= c)[0]
        pairs = []
        if m and len(keep):
            mr = hungarian(cost[keep])
            pairs = [(int(keep[i]), j) for i, j in mr.pairs if close[keep[i], j]]
        out.append((c, len(keep), pairs))
    return out, p, g


def openlane_fscore(pred_scenes, gt_scenes):
    """Max F1 over score thresholds with the 75% / 1.5 m TP rule, plus errors at that threshold.

    Returns a dict with ``fscore``, ``precision``, ``recall``, ``cate_acc``,
    ``x_near``, ``x_far``, ``z_near``, ``z_far``. Lateral (world y) error is
    reported as the x error, following the image-column convention of the
    OpenLane toolkit; near/far split at 40 m along the driving direction.
    """
    per_scene = []
    n_gt_total = 0
    all_scores = []
    for pred, gt in zip(pred_scenes, gt_scenes):
        scores = np.asarray(pred["scores"], dtype=np.float64)
        table, p, g = _fscore_scene(pred["points"], scores, pred["classes"], gt["points"], gt["classes"])
        per_scene.append((table, p, g, np.asarray(pred["classes"], int), np.asarray(gt["classes"], int)))
        n_gt_total += len(gt["points"])
        all_scores.append(scores)
    zero = {"fscore": 0.0, "precision": 0.0, "recall": 0.0, "cate_acc": 0.0,
            "x_near": 0.0, "x_far": 0.0, "z_near": 0.0, "z_far": 0.0}
    if not all_scores or n_gt_total == 0:
        return zero
    thresholds = np.unique(np.concatenate(all_scores))[::-1]
    best = None
    for t in thresholds:
        tp = n_pred = 0
        chosen = []
        for table, *_ in per_scene:
            entry = None
            for c, k, pairs in table:  # descending cutoffs; the lowest one >= t applies
                if c >= t:
                    entry = (k, pairs)
            if entry is not None:
                n_pred += entry[0]
                tp += len(entry[1])
            chosen.append(entry[1] if entry else [])
        if n_pred == 0:
            continue
        prec, rec = tp / n_pred, tp / n_gt_total
        f = 0.0 if tp == 0 else 2 * prec * rec / (prec + rec)
        if best is None or f > best[0]:
            best = (f, prec, rec, chosen)
    if best is None:
        return zero
    f, prec, rec, chosen = best
    correct = total = 0
    xn, xf, zn, zf = [], [], [], []
    for (table, p, g, pc, gc), pairs in zip(per_scene, chosen):
        for i, j in pairs:
            total += 1
            correct += int(pc[i] == gc[j])
            near = np.abs(g[j][:, 0]) < NEAR_FAR_SPLIT
            dx = np.abs(p[i][:, 1] - g[j][:, 1])
            dz = np.abs(p[i][:, 2] - g[j][:, 2])
            xn.extend(dx[near]); xf.extend(dx[~near]); zn.extend(dz[near]); zf.extend(dz[~near])

    def mean(v):
        return float(np.mean(v)) if v else 0.0

    return {"fscore": float(f), "precision": float(prec), "recall": float(rec),
            "cate_acc": correct / total if total else 0.0,
            "x_near": mean(xn), "x_far": mean(xf), "z_near": mean(zn), "z_far": mean(zf)}


# -- recall diagnostics -------------------------------------------------------------

def lane_recall(pred_scenes, gt_scenes, threshold, score_threshold=0.5):
    """Fraction of GT lanes Hungarian-matched (on Fréchet) to a confident prediction within ``threshold``."""
    hit = total = 0
    for pred, gt in zip(pred_scenes, gt_scenes):
        total += len(gt["points"])
        keep = [i for i, s in enumerate(pred["scores"]) if s >= score_threshold]
        if not keep or not len(gt["points"]):
            continue
        dist = pairwise_lane_distance([pred["points"][i] for i in keep], gt["points"], "frechet")
        mr = hungarian(dist)
        hit += sum(1 for i, j in mr.pairs if dist[i, j] <= threshold)
    return hit / total if total else 0.0


def te_mean_l1(pred_scenes, gt_scenes, score_threshold=0.5):
    """Mean per-coordinate |error| of Hungarian-matched confident TE boxes; unmatched GT count as 1."""
    errs = []
    for pred, gt in zip(pred_scenes, gt_scenes):
        gb = np.asarray(gt["boxes"], dtype=np.float64).reshape(-1, 4)
        keep = np.asarray(pred["scores"], dtype=np.float64) >= score_threshold
        pb = np.asarray(pred["boxes"], dtype=np.float64).reshape(-1, 4)[keep]
        if len(gb) == 0:
            continue
        if len(pb) == 0:
            errs.extend([1.0] * len(gb))
            continue
        cost = np.abs(pb[:, None] - gb[None]).mean(-1)
        mr = hungarian(cost)
        errs.extend(cost[i, j] for i, j in mr.pairs)
        errs.extend([1.0] * (len(gb) - len(mr.pairs)))
    return float(np.mean(errs)) if errs else 0.0


# -- full report ------------------------------------------------------------------------

@dataclass
class MetricReport:
    det_l: float
    det_l_chamfer: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    fscore: float
    cate_acc: float
    x_near: float
    x_far: float
    z_near: float
    z_far: float
    n_scenes: int = 0
    thresholds: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["format_version"] = 1
        return d


def _lane_view(record):
    lanes = record["lanes3d"]
    return {"points": [np.asarray(l["points"], dtype=np.float64) for l in lanes],
            "scores": [float(l["score"]) for l in lanes],
            "classes": [int(l["class_id"]) for l in lanes]}


def _te_view(record):
    tes = record["traffic_elements"]
    return {"boxes": np.asarray([t["box"] for t in tes], dtype=np.float64).reshape(-1, 4),
            "scores": [float(t["score"]) for t in tes],
            "classes": [int(t["class_id"]) for t in tes]}


def evaluate(pred_records, gt_records):
    """Compute the :class:`MetricReport` of prediction records against GT records (same schema)."""
    pred_ids = [r["scene_id"] for r in pred_records]
    gt_ids = [r["scene_id"] for r in gt_records]
    if sorted(pred_ids) != sorted(gt_ids) or len(set(gt_ids)) != len(gt_ids):
        missing = sorted(set(gt_ids) - set(pred_ids))
        extra = sorted(set(pred_ids) - set(gt_ids))
        raise DataError(f"scene ids differ: missing predictions for {missing}, unknown predictions {extra}")
    by_id = {r["scene_id"]: r for r in pred_records}
    preds = [by_id[i] for i in gt_ids]
    pl = [_lane_view(r) for r in preds]
    gl = [_lane_view(r) for r in gt_records]
    pt = [_te_view(r) for r in preds]
    gt_te = [_te_view(r) for r in gt_records]
    dl = det_l(pl, gl)
    dlc = det_l_chamfer(pl, gl)
    dt = det_t(pt, gt_te)
    ll_aps, lt_aps = [], []
    for p_l, g_l, p_t, g_t, pr, gr in zip(pl, gl, pt, gt_te, preds, gt_records):
        rows = lane_instance_match(p_l["points"], p_l["scores"], g_l["points"])
        cols = te_instance_match(p_t["boxes"], p_t["scores"], g_t["boxes"])
        n, m, t = len(p_l["points"]), len(g_l["points"]), len(p_t["scores"])
        pll = np.asarray(pr.get("topology_ll", []), dtype=np.float64).reshape(n, n)
        gll = np.asarray(gr.get("topology_ll", []), dtype=np.float64).reshape(m, m) > 0.5
        plt_ = np.asarray(pr.get("topology_lt", []), dtype=np.float64).reshape(n, t)
        glt = np.asarray(gr.get("topology_lt", []), dtype=np.float64).reshape(m, len(g_t["scores"])) > 0.5
        ll_aps += top_metric(pll, rows, rows, gll)
        lt_aps += top_metric(plt_, rows, cols, glt)
    # fsum is correctly rounded, so the mean does not depend on vertex order
    top_ll = math.fsum(ll_aps) / len(ll_aps) if ll_aps else 0.0
    top_lt = math.fsum(lt_aps) / len(lt_aps) if lt_aps else 0.0
    fs = openlane_fscore(pl, gl)
    return MetricReport(
        det_l=dl, det_l_chamfer=dlc, det_t=dt, top_ll=top_ll, top_lt=top_lt,
        ols=ols(dl, dt, top_ll, top_lt), fscore=fs["fscore"], cate_acc=fs["cate_acc"],
        x_near=fs["x_near"], x_far=fs["x_far"], z_near=fs["z_near"], z_far=fs["z_far"],
        n_scenes=len(gt_records),
        thresholds={"det_l_frechet_m": list(FRECHET_THRESHOLDS), "det_l_chamfer_m": list(CHAMFER_THRESHOLDS),
                    "det_t_iou": TE_IOU_THRESHOLD, "top_lane_frechet_m": TOP_LANE_FRECHET,
                    "top_te_iou": TOP_TE_IOU, "fscore_dist_m": FSCORE_DIST, "fscore_ratio": FSCORE_RATIO,
                    "near_far_split_m": NEAR_FAR_SPLIT, "eval_points": EVAL_POINTS})
