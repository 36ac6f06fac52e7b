"""Bird's-eye-view SVG rendering of GT (red) and predicted (green) lanes with topology."""
from __future__ import annotations

import numpy as np

SCALE = 8.0  # pixels per metre
MARGIN = 30.0
TE_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v):
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, bev_range):
        self.x0, self.x1, self.y0, self.y1 = bev_range[:4]
        self.width = (self.y1 - self.y0) * SCALE + 2 * MARGIN
        self.height = (self.x1 - self.x0) * SCALE + 3 * MARGIN
        self.items = []

    def to_px(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        sx = MARGIN + (self.y1 - pts[:, 1]) * SCALE
        sy = 2 * MARGIN + (self.x1 - pts[:, 0]) * SCALE
        return np.stack([sx, sy], axis=1)

    def polyline(self, pts, color, width, opacity=1.0, marker=True):
        px = self.to_px(np.asarray(pts, dtype=np.float64))
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in px)
        end = ' marker-end="url(#arrow)"' if marker else ""
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}" '
                          f'stroke-opacity="{opacity}"{end}/>')

    def line(self, a, b, color, width, dash=None, marker=False):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        extra += ' marker-end="url(#arrow)"' if marker else ""
        self.items.append(f'<line x1="{_fmt(a[0])}" y1="{_fmt(a[1])}" x2="{_fmt(b[0])}" y2="{_fmt(b[1])}" '
                          f'stroke="{color}" stroke-width="{width}"{extra}/>')

    def render(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(self.width)}" height="{_fmt(self.height)}" '
                f'viewBox="0 0 {_fmt(self.width)} {_fmt(self.height)}">')
        defs = ('<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="5" markerHeight="5" '
                'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="#444"/></marker></defs>')
        bg = f'<rect width="{_fmt(self.width)}" height="{_fmt(self.height)}" fill="white"/>'
        ego = self.to_px(np.array([[0.0, 0.0, 0.0]]))[0]
        ego_mark = f'<circle cx="{_fmt(ego[0])}" cy="{_fmt(ego[1])}" r="4" fill="black"/>'
        return "\n".join([head, defs, bg, ego_mark, *self.items, "</svg>"]) + "\n"


def _te_anchor(canvas, box):
    """Place a TE marker in the strip above the plot at the box's image column."""
    return np.array([MARGIN + float(box[0]) * (canvas.width - 2 * MARGIN), MARGIN * 0.8])


def render_bev_svg(gt_record, pred_record=None, bev_range=(-15.0, 50.0, -15.0, 15.0), score_threshold=0.5,
                   edge_threshold=0.5):
    """SVG text for one scene. ``gt_record``/``pred_record`` use the prediction-record schema."""
    c = _Canvas(bev_range)
    for lane in gt_record.get("lanes3d", []):
        c.polyline(lane["points"], "#d62728", 3, 0.7)
    tes = gt_record.get("traffic_elements", [])
    for k, te in enumerate(tes):
        p = _te_anchor(c, te["box"])
        color = TE_COLORS[int(te["class_id"]) % len(TE_COLORS)]
        c.items.append(f'<rect x="{_fmt(p[0] - 5)}" y="{_fmt(p[1] - 5)}" width="10" height="10" fill="{color}"/>')
    if pred_record is None:
        return c.render()
    lanes = pred_record.get("lanes3d", [])
    keep = [i for i, l in enumerate(lanes) if l["score"] >= score_threshold]
    for i in keep:
        c.polyline(lanes[i]["points"], "#2ca02c", 1.5)
    ll = np.asarray(pred_record.get("topology_ll", []), dtype=np.float64).reshape(len(lanes), len(lanes))
    for m in keep:
        for n in keep:
            if m != n and ll[m, n] >= edge_threshold:
                a = c.to_px(np.asarray(lanes[m]["points"])[-1:])[0]
                b = c.to_px(np.asarray(lanes[n]["points"])[:1])[0]
                c.line(a, b, "#444", 1, marker=True)
    pte = pred_record.get("traffic_elements", [])
    lt = np.asarray(pred_record.get("topology_lt", []), dtype=np.float64).reshape(len(lanes), len(pte))
    for t, te in enumerate(pte):
        if te["score"] < score_threshold:
            continue
        anchor = _te_anchor(c, te["box"])
        c.items.append(f'<circle cx="{_fmt(anchor[0])}" cy="{_fmt(anchor[1])}" r="4" fill="none" stroke="#2ca02c"/>')
        for m in keep:
            if lt[m, t] >= edge_threshold:
                mid = np.asarray(lanes[m]["points"])
                c.line(anchor, c.to_px(mid[len(mid) // 2:len(mid) // 2 + 1])[0], "#1f77b4", 0.8, dash="3,2")
    return c.render()
