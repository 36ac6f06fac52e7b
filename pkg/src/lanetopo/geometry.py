"""Pinhole cameras, polyline utilities and the distance primitives used by metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from .errors import DegenerateInputError, DomainError

DEPTH_EPS = 1e-6


@dataclass
class Camera:
    """Pinhole camera. World frame: x forward, y left, z up; camera frame: x right, y down, z forward."""

    intrinsics: np.ndarray  # 3x3
    world_to_cam: np.ndarray  # 4x4 rigid
    image_size: tuple  # (H, W) pixels

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @classmethod
    def looking(cls, position, yaw, pitch, image_size, fov_deg=None, focal=None):
        """Camera at ``position`` rotated ``yaw`` about +z and pitched down by ``pitch`` (radians)."""
        h, w = image_size
        if focal is None:
            focal = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
        k = np.array([[focal, 0, w / 2], [0, focal, h / 2], [0, 0, 1.0]])
        cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
        forward = np.array([cy * cp, sy * cp, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        pose = np.eye(4)
        pose[:3, :3] = rot
        pose[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
        return cls(k, pose, (h, w))

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    def projection_matrix(self):
        """Padded 4x4 world-to-image matrix (intrinsics @ world_to_cam)."""
        k4 = np.eye(4)
        k4[:3, :3] = self.intrinsics
        return k4 @ self.world_to_cam

    def cam_to_world(self):
        inv = np.eye(4)
        rt = self.rotation.T
        inv[:3, :3] = rt
        inv[:3, 3] = -rt @ self.translation
        return inv

    def lift_affine(self):
        """(M, c) with world = d * M @ [u, v, 1] + c for a pixel at depth d."""
        m = self.rotation.T @ np.linalg.inv(self.intrinsics)
        c = -self.rotation.T @ self.translation
        return m, c

    def to_dict(self):
        return {"intrinsics": self.intrinsics.tolist(), "world_to_cam": self.world_to_cam.tolist(),
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["intrinsics"]), np.array(d["world_to_cam"]), tuple(d["image_size"]))


def project_points(cam: Camera, pts):
    """Vectorised projection of (N, 3) world points; returns (uv (N, 2) pixels, depth (N,))."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    pc = pts @ cam.rotation.T + cam.translation
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = pc @ cam.intrinsics.T
        uv = proj[:, :2] / proj[:, 2:3]
    return uv, depth


def project_point(cam: Camera, p_world):
    """Return (u, v, depth). ``depth <= 0`` means the point is behind the camera."""
    uv, depth = project_points(cam, np.asarray(p_world, dtype=np.float64)[None])
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def lift_pixel(cam: Camera, u, v, depth):
    """World point seen at pixel (u, v) with camera-frame depth ``depth``."""
    if np.any(np.asarray(depth) <= 0):
        raise DomainError("lift_pixel needs a positive depth")
    p_cam = depth * (np.linalg.inv(cam.intrinsics) @ np.array([u, v, 1.0]))
    return cam.rotation.T @ (p_cam - cam.translation)


def polyline_length(pts):
    pts = np.asarray(pts, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def densify(pts, step):
    """Insert points so that consecutive samples are at most ``step`` apart (vertices kept)."""
    pts = np.asarray(pts, dtype=np.float64)
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def resample_equidistant(poly, n_points):
    """Resample to ``n_points`` at equal arc-length spacing, endpoints preserved."""
    pts = np.asarray(poly, dtype=np.float64)
    if len(pts) < 2:
        raise DegenerateInputError("need at least two points to resample")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if not total > 0:
        raise DegenerateInputError("polyline has zero length")
    targets = np.linspace(0.0, total, n_points)
    out = np.stack([np.interp(targets, cum, pts[:, d]) for d in range(pts.shape[1])], axis=1)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def _visible(cam, pts):
    uv, depth = project_points(cam, pts)
    h, w = cam.image_size
    ok = (depth > DEPTH_EPS) & np.isfinite(uv).all(axis=1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return ok, uv


def _refine_crossing(cam, inside, outside, iters=40):
    """Bisect the segment inside->outside to the last visible point."""
    a, b = inside, outside
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if _visible(cam, mid[None])[0][0]:
            a = mid
        else:
            b = mid
    return a


def clip_polyline_to_view(cam: Camera, lane, n_points=6, refine=True):
    """Visible runs of a 3D polyline as pixel-space polylines.

    The lane is densified with step ``length / (20 * n_points)``; maximal runs
    of samples with positive depth inside the image are returned. When
    ``refine`` is set, each run is extended to the exact image border by
    bisection on the adjoining invisible segment.
    """
    lane = np.asarray(lane, dtype=np.float64)
    length = polyline_length(lane)
    if length <= 0:
        return []
    dense = densify(lane, length / (20 * n_points))
    ok, uv = _visible(cam, dense)
    runs = []
    i, n = 0, len(dense)
    while i < n:
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and ok[j + 1]:
            j += 1
        pts3 = dense[i:j + 1]
        if refine:
            head = [_refine_crossing(cam, dense[i], dense[i - 1])] if i > 0 else []
            tail = [_refine_crossing(cam, dense[j], dense[j + 1])] if j + 1 < n else []
            pts3 = np.concatenate([np.array(head).reshape(-1, 3), pts3, np.array(tail).reshape(-1, 3)])
        seg_uv, _ = project_points(cam, pts3)
        keep = np.concatenate([[True], np.linalg.norm(np.diff(seg_uv, axis=0), axis=1) > 1e-9])
        seg_uv = seg_uv[keep]
        if len(seg_uv) >= 2:
            runs.append(seg_uv)
        i = j + 1
    return runs


@njit(cache=True)
def _frechet_dp(dist):
    p, q = dist.shape
    ca = np.empty((p, q))
    ca[0, 0] = dist[0, 0]
    for i in range(1, p):
        ca[i, 0] = max(ca[i - 1, 0], dist[i, 0])
    for j in range(1, q):
        ca[0, j] = max(ca[0, j - 1], dist[0, j])
    for i in range(1, p):
        for j in range(1, q):
            ca[i, j] = max(min(ca[i - 1, j], ca[i, j - 1], ca[i - 1, j - 1]), dist[i, j])
    return ca[p - 1, q - 1]


def frechet_distance(a, b):
    """Discrete Fréchet distance (Eiter & Mannila dynamic program)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("Fréchet distance of an empty polyline")
    return float(_frechet_dp(cdist(a, b)))


def chamfer_distance(a, b):
    """Symmetric mean Chamfer distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("Chamfer distance of an empty point set")
    d = cdist(a, b)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def cxcywh_to_xyxy(box):
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_iou(a, b):
    """IoU of axis-aligned boxes given as (x1, y1, x2, y2); broadcasts over leading axes."""
    return _iou_terms(a, b)[0]


def box_giou(a, b):
    iou, union, enclose = _iou_terms(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return iou - np.where(enclose > 0, (enclose - union) / enclose, 0.0)


def _iou_terms(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou, union, ew * eh


def pairwise_box_iou(a, b):
    """(n, m) IoU matrix for xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return box_iou(a[:, None, :], b[None, :, :])
