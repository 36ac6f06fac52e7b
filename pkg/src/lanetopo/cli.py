"""Command-line interface: gen-scenes, train, infer, eval, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .config import RunConfig
from .errors import ConfigError, DataError, DegenerateInputError, DomainError, MatchingError, ShapeError, TrainingError
from .scene import SceneConfig, gen_scene, read_scenes, write_scenes

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

_ALIASES = {"refine_2d": "--no-refine"}


def _add_config_flags(parser, model=True):
    """One flag per RunConfig / SceneConfig field; unset flags leave the config value alone."""
    if model:
        group = parser.add_argument_group("model and training configuration")
        for f in fields(RunConfig):
            if f.name != "scene":
                _add_field(group, f, f"--{f.name.replace('_', '-')}", f.name)
    scene = parser.add_argument_group("scene configuration")
    for f in fields(SceneConfig):
        _add_field(scene, f, f"--scene-{f.name.replace('_', '-')}", f"scene.{f.name}")


def _add_field(group, f, flag, dest):
    default = f.default
    if isinstance(default, bool):
        flags = [flag]
        group.add_argument(*flags, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        alias = _ALIASES.get(f.name) if not dest.startswith("scene.") else None
        if alias:
            group.add_argument(alias, dest=dest, action="store_false", help=f"same as --no-{flag[2:]}")
    elif isinstance(default, tuple):
        group.add_argument(flag, dest=dest, type=type(default[0]), nargs=len(default), default=None,
                           metavar="V")
    else:
        group.add_argument(flag, dest=dest, type=type(default), default=None)


def build_config(args):
    """Config file (if any) overlaid with every explicitly given flag."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes, scene_changes = {}, {}
    for key, value in vars(args).items():
        if value is None:
            continue
        if key.startswith("scene."):
            scene_changes[key[6:]] = list(value) if isinstance(value, list) else value
        elif key in {f.name for f in fields(RunConfig)}:
            changes[key] = tuple(value) if isinstance(value, list) else value
    if scene_changes:
        changes["scene"] = scene_changes
    return cfg.replace(**changes) if changes else cfg


def build_scene_config(args):
    """Scene section of the config file (if any) overlaid with the ``--scene-*`` flags.

    Model-side checks are skipped: generating scenes does not depend on query counts.
    """
    base = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                base = json.load(fh).get("scene", {})
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from exc
    for key, value in vars(args).items():
        if value is not None and key.startswith("scene."):
            base[key[6:]] = list(value) if isinstance(value, list) else value
    return SceneConfig.from_dict(base)


def cmd_gen_scenes(args):
    cfg = build_scene_config(args)
    if args.num < 0:
        raise ConfigError("--num must be >= 0")
    scenes = [gen_scene(args.seed + i, cfg) for i in range(args.num)]
    write_scenes(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_train(args):
    from .training import train

    cfg = build_config(args)
    scenes = read_scenes(args.scenes)
    log_path = args.log or f"{args.out_ckpt}.log.jsonl"
    _, history = train(cfg, scenes, log_path=log_path, ckpt_path=args.out_ckpt)
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {cfg.steps} steps on {len(scenes)} scenes; final loss {final:.4f}; checkpoint {args.out_ckpt}")


def cmd_infer(args):
    from .inference import predict, write_records
    from .training import load_model

    model = load_model(args.ckpt)
    scenes = read_scenes(args.scenes)
    sc = model.cfg.scene
    for s in scenes:
        if len(s.cameras) != sc.n_cameras or len(s.features) != sc.n_cameras:
            raise ConfigError(f"scene {s.scene_id} has {len(s.cameras)} cameras; checkpoint expects {sc.n_cameras}")
        if any(f.shape[0] != sc.c_in for cam in s.features for f in cam):
            raise ConfigError(f"scene {s.scene_id} feature channels do not match the checkpoint")
    records = predict(model, scenes)
    write_records(args.out, records)
    print(f"wrote {len(records)} predictions to {args.out}")


def _load_records(path):
    """Prediction records, or GT records when the file holds scenes."""
    from .inference import gt_record, read_records

    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is None:
        return []
    try:
        is_scene = "cameras" in json.loads(first)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    if is_scene:
        return [gt_record(s) for s in read_scenes(path)]
    return read_records(path)


def cmd_eval(args):
    from .metrics import evaluate

    preds = _load_records(args.pred)
    gts = _load_records(args.gt)
    if not preds and gts:
        preds = [{"scene_id": g["scene_id"], "lanes3d": [], "traffic_elements": [], "topology_ll": [],
                  "topology_lt": []} for g in gts]
    report = evaluate(preds, gts).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out_report:
        with open(args.out_report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_plot(args):
    from .inference import gt_record
    from .plot import render_bev_svg

    scenes = read_scenes(args.scene)
    if not scenes:
        raise DataError(f"{args.scene} holds no scenes")
    scene = scenes[0] if args.scene_id is None else next((s for s in scenes if s.scene_id == args.scene_id), None)
    if scene is None:
        raise DataError(f"scene id {args.scene_id!r} not in {args.scene}")
    pred = None
    if args.pred:
        recs = {r["scene_id"]: r for r in _load_records(args.pred)}
        pred = recs.get(scene.scene_id)
    bev = tuple(args.bev_range) if args.bev_range else RunConfig().bev_range
    svg = render_bev_svg(gt_record(scene), pred, bev)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")


def make_parser():
    p = argparse.ArgumentParser(prog="lanetopo", description="Lane topology pipeline on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate synthetic scenes as JSONL")
    g.add_argument("--num", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="RunConfig JSON file (its scene section is used)")
    g.add_argument("--out", required=True)
    _add_config_flags(g, model=False)
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("train", help="train on a scene file")
    t.add_argument("--scenes", required=True)
    t.add_argument("--config")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--log", help="JSONL loss log (default: <out-ckpt>.log.jsonl)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict lanes, traffic elements and topology")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scenes", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="prediction JSONL (or a scene file for GT-as-prediction)")
    e.add_argument("--gt", required=True, help="scene JSONL or GT records")
    e.add_argument("--out-report")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="bird's-eye-view SVG of one scene")
    pl.add_argument("--scene", required=True)
    pl.add_argument("--pred")
    pl.add_argument("--scene-id")
    pl.add_argument("--bev-range", type=float, nargs=4, metavar="V")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, DomainError, MatchingError, ShapeError, DegenerateInputError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
