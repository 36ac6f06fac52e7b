"""Overfit four scenes and print detection, topology and recall numbers as training goes.

    python3 demos/overfit.py --steps 2500 --init-mode prior2d
    python3 demos/overfit.py --steps 2500 --init-mode random --layers-3d 12
"""
import argparse
import time

import numpy as np

from lanetopo.config import RunConfig
from lanetopo.inference import gt_record, predict
from lanetopo.metrics import _lane_view, _te_view, evaluate, lane_recall, te_mean_l1
from lanetopo.scene import gen_scene
from lanetopo.training import train


def lanes2d_view(records):
    out = []
    for rec in records:
        for cam in rec["lanes2d"]:
            out.append({"points": [np.asarray(x["points"]) for x in cam],
                        "scores": [x["score"] for x in cam], "classes": [x["class_id"] for x in cam]})
    return out


def summary(model, scenes, gts):
    preds = predict(model, scenes)
    rep = evaluate(preds, gts)
    return {
        "recall3d@1.5m": lane_recall([_lane_view(r) for r in preds], [_lane_view(r) for r in gts], 1.5),
        "recall2d@10px": lane_recall(lanes2d_view(preds), lanes2d_view(gts), 10.0),
        "det_l": rep.det_l, "det_l_chamfer": rep.det_l_chamfer, "det_t": rep.det_t,
        "top_ll": rep.top_ll, "top_lt": rep.top_lt,
        "te_l1": te_mean_l1([_te_view(r) for r in preds], [_te_view(r) for r in gts]),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--init-mode", default="prior2d", choices=("prior2d", "random", "mixed"))
    ap.add_argument("--layers-3d", type=int, default=2)
    ap.add_argument("--report-every", type=int, default=500)
    args = ap.parse_args()

    cfg = RunConfig(steps=args.steps, init_mode=args.init_mode, layers_3d=args.layers_3d, log_every=0)
    scenes = [gen_scene(i, cfg.scene) for i in range(4)]
    gts = [gt_record(s) for s in scenes]
    t0 = time.time()

    def on_step(model, rec):
        step = rec["step"]
        if step % args.report_every == 0 or step == cfg.steps - 1:
            numbers = ", ".join(f"{k} {v:.3f}" for k, v in summary(model, scenes, gts).items())
            print(f"step {step:5d}  loss {rec['total']:9.3f}  {numbers}  ({time.time() - t0:.0f}s)", flush=True)

    train(cfg, scenes, on_step=on_step)


if __name__ == "__main__":
    main()
