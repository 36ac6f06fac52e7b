"""Seeded synthetic driving scenes: camera rig, lanes, topology, traffic elements, feature maps."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .geometry import Camera, clip_polyline_to_view, polyline_length, resample_equidistant

FORMAT_VERSION = 1
CONNECT_TOL = 0.1


@dataclass
class SceneConfig:
    n_cameras: int = 3
    image_size: tuple = (96, 160)
    feature_size: tuple = (24, 40)
    levels: int = 2
    fov_deg: float = 120.0
    camera_height: float = 1.6
    camera_pitch_deg: float = 4.0
    pose_jitter: float = 0.02
    world_range: tuple = (-15.0, 50.0, -15.0, 15.0, -1.0, 1.0)
    min_lanes: int = 4
    max_lanes: int = 14
    min_te: int = 1
    max_te: int = 4
    num_lane_classes: int = 2
    num_te_classes: int = 4
    lane_samples: int = 21
    n_points: int = 6
    min_fragment_px: float = 6.0
    noise_channels: int = 2
    noise_std: float = 0.1
    dt_truncation: float = 4.0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.feature_size = tuple(int(v) for v in self.feature_size)
        self.world_range = tuple(float(v) for v in self.world_range)
        self.validate()

    @property
    def c_in(self):
        return 4 + self.num_lane_classes + self.noise_channels

    def level_shapes(self):
        h, w = self.feature_size
        return [(h >> v, w >> v) for v in range(self.levels)]

    def validate(self):
        if self.n_cameras < 1:
            raise ConfigError("need at least one camera")
        if not 1 <= self.min_lanes <= self.max_lanes:
            raise ConfigError(f"invalid lane bounds [{self.min_lanes}, {self.max_lanes}]")
        if not 0 <= self.min_te <= self.max_te:
            raise ConfigError(f"invalid traffic element bounds [{self.min_te}, {self.max_te}]")
        if self.max_lanes > 21:
            raise ConfigError("at most 21 lanes fit the road templates")
        x0, x1, y0, y1, z0, z1 = self.world_range
        if not (x0 < x1 and y0 < y1 and z0 <= z1):
            raise ConfigError(f"empty world range {self.world_range}")
        if x1 - x0 < 20 or y1 - y0 < 10:
            raise ConfigError("world range too small for the lane templates")
        h, w = self.feature_size
        if self.levels < 1 or (h >> (self.levels - 1)) < 1 or (w >> (self.levels - 1)) < 1:
            raise ConfigError("feature pyramid too deep for the feature size")
        if self.n_points < 2:
            raise ConfigError("n_points must be >= 2")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Lane2D:
    points: np.ndarray  # (N_P, 2) normalised image coordinates
    source_lane: int
    class_id: int


@dataclass
class Scene:
    scene_id: str
    seed: int
    cameras: list
    lanes3d: list  # list of (n, 3) arrays
    lane_classes: list
    lane_adjacency: np.ndarray  # (l, l) bool
    te_boxes: np.ndarray  # (t, 4) normalised cxcywh in the front view
    te_classes: list
    lane_te: np.ndarray  # (l, t) bool
    features: list = field(default_factory=list)  # per camera: list of (C, H, W) float32
    lanes2d_gt: list = field(default_factory=list)  # per camera: list of Lane2D

    @property
    def n_lanes(self):
        return len(self.lanes3d)


# -- generation --------------------------------------------------------------

def _bezier(p0, p1, p2, t):
    t = np.asarray(t)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _split_bezier(p0, p1, p2, ts):
    """Split a quadratic Bézier at sorted parameters; pieces share endpoints exactly."""
    pieces = []
    cur = (p0, p1, p2)
    prev = 0.0
    for t in list(ts) + [1.0]:
        if t >= 1.0:
            pieces.append(cur)
            break
        local = (t - prev) / (1.0 - prev)
        a, b, c = cur
        ab = a + local * (b - a)
        bc = b + local * (c - b)
        m = ab + local * (bc - ab)
        pieces.append((a, ab, m))
        cur = (m, bc, c)
        prev = t
    return pieces


def _road_templates(n):
    opts = []
    for k in range(1, 4):
        for s in range(1, 4):
            if k * s <= n and n - k * s <= 2 * k * (s - 1):
                opts.append((k, s))
    return opts


def _in_range(pts, wr, margin=0.0):
    x0, x1, y0, y1, _, _ = wr
    return bool(np.all((pts[:, 0] >= x0 + margin) & (pts[:, 0] <= x1 - margin)
                       & (pts[:, 1] >= y0 + margin) & (pts[:, 1] <= y1 - margin)))


def make_camera_rig(cfg: SceneConfig, rng=None):
    cams = []
    for i in range(cfg.n_cameras):
        yaw = 2 * np.pi * i / cfg.n_cameras
        pitch = np.radians(cfg.camera_pitch_deg)
        height = cfg.camera_height
        if rng is not None and cfg.pose_jitter:
            yaw += rng.uniform(-1, 1) * cfg.pose_jitter
            pitch += rng.uniform(-1, 1) * cfg.pose_jitter
            height += rng.uniform(-1, 1) * 5 * cfg.pose_jitter
        pos = np.array([np.cos(yaw), np.sin(yaw), height])
        cams.append(Camera.looking(pos, yaw, pitch, cfg.image_size, fov_deg=cfg.fov_deg))
    return cams


def _generate_lanes(cfg: SceneConfig, rng):
    wr = cfg.world_range
    x0, x1, y0, y1, z0, z1 = wr
    for _ in range(100):
        n = int(rng.integers(cfg.min_lanes, cfg.max_lanes + 1))
        opts = _road_templates(n)
        if not opts:
            continue
        k_lanes, n_seg = opts[int(rng.integers(len(opts)))]
        n_turns = n - k_lanes * n_seg
        spacing = 3.5
        ymid = 0.5 * (y0 + y1)
        base = ymid - spacing * (k_lanes - 1) / 2 + rng.uniform(-1.5, 1.5)
        shift = rng.uniform(-3, 3)
        bend = rng.uniform(-2.5, 2.5)
        grade = rng.uniform(-0.6, 0.6) / max(abs(x0), abs(x1))
        zoff = rng.uniform(-0.2, 0.2)
        xs, xe = x0 + 1.0, x1 - 1.0
        # first junction sits next to the ego vehicle, the second one ahead
        if n_seg == 1:
            ts = np.array([])
        elif n_seg == 2:
            ts = np.array([rng.uniform(0.18, 0.45)])
        else:
            ts = np.array([rng.uniform(0.18, 0.28), rng.uniform(0.5, 0.7)])

        def zf(x):
            return np.clip(grade * x + zoff, z0, z1)

        lanes, classes, slots = [], [], []
        for k in range(k_lanes):
            yk = base + spacing * k
            p0 = np.array([xs, yk, zf(xs)])
            p2 = np.array([xe, yk + shift, zf(xe)])
            xm = 0.5 * (xs + xe)
            p1 = np.array([xm, yk + shift / 2 + bend, zf(xm)])
            for si, piece in enumerate(_split_bezier(p0, p1, p2, ts)):
                lanes.append(piece)
                classes.append(0)
                if si < n_seg - 1:
                    tangent = piece[2] - piece[1]
                    slots.extend([(piece[2], tangent, +1), (piece[2], tangent, -1)])
        order = rng.permutation(len(slots))
        turns = []
        for idx in order:
            if len(turns) == n_turns:
                break
            start, tangent, side = slots[idx]
            t2 = tangent[:2] / np.linalg.norm(tangent[:2])
            normal = np.array([-t2[1], t2[0]]) * side
            radius = rng.uniform(6.0, 10.0)
            for r in (radius, 6.0, 4.5):
                ctrl = start.copy()
                ctrl[:2] = start[:2] + r * t2
                end = start.copy()
                end[:2] = ctrl[:2] + r * normal
                ctrl[2] = zf(ctrl[0])
                end[2] = zf(end[0])
                if _in_range(_bezier(start, ctrl, end, np.linspace(0, 1, 9)), wr, margin=0.5):
                    turns.append((start, ctrl, end))
                    break
        if len(turns) < n_turns:
            continue
        lanes.extend(turns)
        classes.extend([1 % cfg.num_lane_classes] * len(turns))
        ok = all(_in_range(_bezier(*ln, np.linspace(0, 1, 9)), wr) for ln in lanes)
        if ok:
            t = np.linspace(0, 1, cfg.lane_samples)
            pts = [_bezier(*ln, t) for ln in lanes]
            for p, ln in zip(pts, lanes):
                p[0], p[-1] = ln[0], ln[2]
            return pts, classes
    raise ConfigError("could not realise a lane layout for this configuration")


def lane_adjacency(lanes, tol=CONNECT_TOL):
    n = len(lanes)
    adj = np.zeros((n, n), dtype=bool)
    for m in range(n):
        for k in range(n):
            if m != k and np.linalg.norm(lanes[m][-1] - lanes[k][0]) < tol:
                adj[m, k] = True
    return adj


def _generate_traffic_elements(cfg, rng, cam, lanes):
    t = int(rng.integers(cfg.min_te, cfg.max_te + 1))
    boxes = np.zeros((t, 4))
    classes = []
    for i in range(t):
        w = rng.uniform(0.06, 0.11)
        h = rng.uniform(0.08, 0.15)
        cx = (i + 0.5) / t + rng.uniform(-0.3, 0.3) / max(t, 1) * 0.5
        cx = float(np.clip(cx, w / 2 + 0.01, 1 - w / 2 - 0.01))
        cy = rng.uniform(0.12, 0.32)
        boxes[i] = (cx, cy, w, h)
        classes.append(int(rng.integers(cfg.num_te_classes)))
    lane_te = np.zeros((len(lanes), t), dtype=bool)
    if t == 0 or not lanes:
        return boxes, classes, lane_te
    # attach each element to the lane whose front-view fragment ends nearest horizontally
    anchor = np.full(len(lanes), np.nan)
    for li, lane in enumerate(lanes):
        runs = clip_polyline_to_view(cam, lane, cfg.n_points)
        if runs:
            far = max(runs, key=len)[-1]
            anchor[li] = far[0] / cam.image_size[1]
    for i in range(t):
        if np.all(np.isnan(anchor)):
            order = rng.permutation(len(lanes))
        else:
            order = np.argsort(np.where(np.isnan(anchor), np.inf, np.abs(anchor - boxes[i, 0])))
        lane_te[order[0], i] = True
        if len(order) > 1 and rng.uniform() < 0.3 and not np.isnan(anchor[order[1]]):
            lane_te[order[1], i] = True
    return boxes, classes, lane_te


def gen_scene(seed, cfg: SceneConfig | None = None, scene_id=None):
    """Deterministic scene for ``(seed, cfg)`` with ground truth and feature maps."""
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    cams = make_camera_rig(cfg, rng)
    lanes, classes = _generate_lanes(cfg, rng)
    adj = lane_adjacency(lanes)
    boxes, te_classes, lane_te = _generate_traffic_elements(cfg, rng, cams[0], lanes)
    scene = Scene(scene_id or f"scene-{seed:06d}", int(seed), cams, lanes, classes, adj,
                  boxes, te_classes, lane_te)
    scene.lanes2d_gt = derive_2d_gt(scene, cfg.n_points, cfg.min_fragment_px)
    scene.features = rasterize_features(scene, cfg, rng)
    return scene


def derive_2d_gt(scene: Scene, n_points=6, min_fragment_px=6.0):
    """Per-camera 2D lane ground truth: visible runs resampled to ``n_points``."""
    out = []
    for cam in scene.cameras:
        h, w = cam.image_size
        per_cam = []
        for li, lane in enumerate(scene.lanes3d):
            for run in clip_polyline_to_view(cam, lane, n_points):
                if polyline_length(run) < min_fragment_px:
                    continue
                pts = resample_equidistant(run, n_points) / np.array([w, h])
                per_cam.append(Lane2D(np.clip(pts, 0.0, 1.0), li, scene.lane_classes[li]))
        out.append(per_cam)
    return out


def _segment_distances(pix, poly):
    """Distance from each pixel centre (P, 2) to a polyline (n, 2)."""
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip(((pix[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0, 1)
    proj = a[None] + t[..., None] * ab[None]
    return np.sqrt(((pix[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)


def rasterize_features(scene: Scene, cfg: SceneConfig, rng=None):
    """Render per-camera multi-level (C_in, H, W) float32 maps.

    Channels: lane occupancy (anti-aliased, 1px tent), truncated distance to
    the nearest lane pixel, per-class occupancy, traffic-element occupancy and
    category code (front camera only), then seeded noise.
    """
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    nc = cfg.num_lane_classes
    maps = []
    for ci, cam in enumerate(scene.cameras):
        ih, iw = cam.image_size
        runs = [(li, run) for li, lane in enumerate(scene.lanes3d)
                for run in clip_polyline_to_view(cam, lane, cfg.n_points)]
        levels = []
        for (fh, fw) in cfg.level_shapes():
            ys, xs = np.meshgrid(np.arange(fh) + 0.5, np.arange(fw) + 0.5, indexing="ij")
            pix = np.stack([xs.ravel(), ys.ravel()], axis=-1)
            occ = np.zeros(fh * fw)
            cls = np.zeros((nc, fh * fw))
            scale = np.array([fw / iw, fh / ih])
            for li, run in runs:
                d = _segment_distances(pix, run * scale)
                o = np.clip(1.0 - d, 0.0, 1.0)
                occ = np.maximum(occ, o)
                c = scene.lane_classes[li]
                cls[c] = np.maximum(cls[c], o)
            occ = occ.reshape(fh, fw)
            lane_pix = occ >= 0.5
            if lane_pix.any():
                dist = ndimage.distance_transform_edt(~lane_pix)
            else:
                dist = np.full((fh, fw), np.inf)
            dt = np.minimum(dist, cfg.dt_truncation) / cfg.dt_truncation
            te_occ = np.zeros((fh, fw))
            te_cat = np.zeros((fh, fw))
            if ci == 0:
                for box, cat in zip(scene.te_boxes, scene.te_classes):
                    cx, cy, bw, bh = box
                    inside = ((np.abs(xs / fw - cx) <= bw / 2) & (np.abs(ys / fh - cy) <= bh / 2))
                    te_occ[inside] = 1.0
                    te_cat[inside] = (cat + 1) / cfg.num_te_classes
            noise = rng.normal(0.0, cfg.noise_std, size=(cfg.noise_channels, fh, fw))
            stack = np.concatenate([occ[None], dt[None], cls.reshape(nc, fh, fw),
                                    te_occ[None], te_cat[None], noise])
            levels.append(stack.astype(np.float32))
        maps.append(levels)
    return maps


# -- serialisation -------------------------------------------------------------

def _encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "dtype": "<f4",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d.get("dtype", "<f4"))).reshape(d["shape"]).astype(np.float32)


def scene_to_dict(scene: Scene):
    return {
        "format_version": FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "cameras": [c.to_dict() for c in scene.cameras],
        "lanes3d": [{"points": np.asarray(p).tolist(), "class_id": int(c)}
                    for p, c in zip(scene.lanes3d, scene.lane_classes)],
        "lane_adjacency": scene.lane_adjacency.astype(int).tolist(),
        "traffic_elements": [
            {"box": np.asarray(b).tolist(), "category": int(c),
             "lanes": np.nonzero(scene.lane_te[:, i])[0].tolist()}
            for i, (b, c) in enumerate(zip(scene.te_boxes, scene.te_classes))],
        "lanes2d_gt": [[{"points": g.points.tolist(), "source_lane": g.source_lane,
                         "class_id": g.class_id} for g in cam] for cam in scene.lanes2d_gt],
        "features": [[_encode_array(f) for f in cam] for cam in scene.features],
    }


def scene_from_dict(d):
    if d.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported scene format_version {d.get('format_version')!r}")
    lanes = [np.asarray(ln["points"], dtype=np.float64) for ln in d["lanes3d"]]
    tes = d["traffic_elements"]
    lane_te = np.zeros((len(lanes), len(tes)), dtype=bool)
    for i, te in enumerate(tes):
        for li in te["lanes"]:
            if not 0 <= li < len(lanes):
                raise DataError(f"traffic element {i} references lane {li}")
            lane_te[li, i] = True
    adj = np.asarray(d["lane_adjacency"], dtype=bool).reshape(len(lanes), len(lanes))
    return Scene(
        scene_id=d["scene_id"], seed=int(d.get("seed", 0)),
        cameras=[Camera.from_dict(c) for c in d["cameras"]],
        lanes3d=lanes, lane_classes=[int(ln["class_id"]) for ln in d["lanes3d"]],
        lane_adjacency=adj,
        te_boxes=np.asarray([te["box"] for te in tes], dtype=np.float64).reshape(-1, 4),
        te_classes=[int(te["category"]) for te in tes], lane_te=lane_te,
        features=[[_decode_array(f) for f in cam] for cam in d.get("features", [])],
        lanes2d_gt=[[Lane2D(np.asarray(g["points"]), int(g["source_lane"]), int(g["class_id"]))
                     for g in cam] for cam in d.get("lanes2d_gt", [])],
    )


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def write_scenes(path, scenes):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(dumps_scene(s) + "\n")


def read_scenes(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(scene_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                if isinstance(exc, DataError):
                    raise
                raise DataError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
    return out
