"""Decode pipeline outputs into prediction records and build GT records in the same schema."""
from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .model import TopoPipeline, make_batch

PREDICTION_FORMAT = 1


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def _decode_instances(logits):
    """Foreground score (max class probability) and class id per instance."""
    prob = _sigmoid(logits)[..., :-1]
    return prob.max(-1), prob.argmax(-1)


def predict(model: TopoPipeline, scenes, batch_size=None):
    """One prediction record per scene (dicts ready for JSON)."""
    cfg = model.cfg
    bs = batch_size or cfg.batch_size
    ni = cfg.scene.n_cameras
    h, w = cfg.scene.image_size
    records = []
    for start in range(0, len(scenes), bs):
        chunk = scenes[start:start + bs]
        out = model(make_batch(chunk, cfg))
        p3 = out.lane3d[-1]
        s3, c3 = _decode_instances(p3.scores.data)
        pts3 = p3.points
        te = out.te[-1]
        st, ct = _decode_instances(te.scores.data)
        boxes = te.boxes.data.astype(np.float64)
        if out.lane2d:
            p2 = out.lane2d[-1]
            s2, c2 = _decode_instances(p2.scores.data)
            pts2 = p2.points.data.astype(np.float64)
        for i, scene in enumerate(chunk):
            rec = {"format_version": PREDICTION_FORMAT, "scene_id": scene.scene_id,
                   "lanes3d": [{"points": pts3[i, k].tolist(), "score": float(s3[i, k]),
                                "class_id": int(c3[i, k])} for k in range(pts3.shape[1])],
                   "traffic_elements": [{"box": boxes[i, k].tolist(), "score": float(st[i, k]),
                                         "class_id": int(ct[i, k])} for k in range(boxes.shape[1])]}
            if out.lane2d:
                rec["lanes2d"] = [[{"points": (pts2[i * ni + c, k] * [w, h]).tolist(),
                                    "score": float(s2[i * ni + c, k]), "class_id": int(c2[i * ni + c, k])}
                                   for k in range(pts2.shape[1])] for c in range(ni)]
            else:
                rec["lanes2d"] = [[] for _ in range(ni)]
            if out.topo_ll is not None:
                rec["topology_ll"] = _sigmoid(out.topo_ll.data[i]).tolist()
                rec["topology_lt"] = _sigmoid(out.topo_lt.data[i]).tolist()
            else:
                n, t = pts3.shape[1], boxes.shape[1]
                rec["topology_ll"] = np.zeros((n, n)).tolist()
                rec["topology_lt"] = np.zeros((n, t)).tolist()
            records.append(rec)
    return records


def gt_record(scene):
    """The scene's ground truth as a prediction record with unit confidence."""
    h, w = scene.cameras[0].image_size if scene.cameras else (1, 1)
    return {
        "format_version": PREDICTION_FORMAT, "scene_id": scene.scene_id,
        "lanes3d": [{"points": np.asarray(l).tolist(), "score": 1.0, "class_id": int(c)}
                    for l, c in zip(scene.lanes3d, scene.lane_classes)],
        "lanes2d": [[{"points": (np.asarray(g.points) * [w, h]).tolist(), "score": 1.0, "class_id": int(g.class_id)}
                     for g in cam] for cam in scene.lanes2d_gt],
        "traffic_elements": [{"box": np.asarray(b).tolist(), "score": 1.0, "class_id": int(c)}
                             for b, c in zip(scene.te_boxes, scene.te_classes)],
        "topology_ll": np.asarray(scene.lane_adjacency, dtype=float).tolist(),
        "topology_lt": np.asarray(scene.lane_te, dtype=float).reshape(scene.n_lanes, len(scene.te_classes)).tolist(),
    }


def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_records(path):
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
                if rec.get("format_version") != PREDICTION_FORMAT:
                    raise DataError(f"{path}:{n}: unsupported format_version {rec.get('format_version')!r}")
                for key in ("scene_id", "lanes3d", "traffic_elements"):
                    if key not in rec:
                        raise DataError(f"{path}:{n}: missing field {key!r}")
                out.append(rec)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return out
