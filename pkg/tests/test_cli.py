import json
import math
from pathlib import Path

import numpy as np
import pytest

from lanetopo import autodiff as ad
from lanetopo.cli import main
from lanetopo.metrics import ols
from lanetopo.model import TopoPipeline
from lanetopo.scene import SceneConfig, read_scenes

from conftest import check_scene_invariants

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def tiny(tmp_path_factory, small_cfg):
    """A config file for the tiny model and a two-scene file generated by the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(small_cfg.replace(steps=3, batch_size=2).to_dict()))
    scenes = root / "scenes.jsonl"
    assert main(["gen-scenes", "--num", "2", "--seed", "5", "--config", str(cfg_path), "--out", str(scenes)]) == 0
    return root, cfg_path, scenes


# -- gen-scenes ---------------------------------------------------------------------


def test_gen_zero_scenes_gives_empty_file(tmp_path):
    out = tmp_path / "none.jsonl"
    assert main(["gen-scenes", "--num", "0", "--out", str(out)]) == 0
    assert out.read_bytes() == b""


def test_gen_scenes_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert main(["gen-scenes", "--num", "3", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_64_default_scenes_pass_invariants(tmp_path):
    out = tmp_path / "s.jsonl"
    assert main(["gen-scenes", "--num", "64", "--out", str(out)]) == 0
    scenes = read_scenes(out)
    assert len(scenes) == 64
    cfg = SceneConfig()
    for s in scenes:
        check_scene_invariants(s, cfg)


def test_gen_rejects_bad_config(tmp_path):
    assert main(["gen-scenes", "--num", "1", "--scene-min-lanes", "99", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-scenes", "--num", "-1", "--out", str(tmp_path / "x")]) == 2


# -- train ---------------------------------------------------------------------------


def _params(path):
    params, _ = ad.load_checkpoint(path)
    return params


def test_train_zero_steps_is_initialisation(tiny, small_cfg):
    root, cfg_path, scenes = tiny
    ckpt = root / "zero.json"
    assert main(["train", "--scenes", str(scenes), "--config", str(cfg_path), "--steps", "0",
                 "--out-ckpt", str(ckpt)]) == 0
    init = TopoPipeline(small_cfg.replace(steps=0, batch_size=2)).store.params
    saved = _params(ckpt)
    assert set(saved) == set(init)
    for name, p in init.items():
        assert np.array_equal(saved[name], p.data), name


def test_train_is_reproducible(tiny):
    root, cfg_path, scenes = tiny
    paths = [root / "r1.json", root / "r2.json"]
    for p in paths:
        assert main(["train", "--scenes", str(scenes), "--config", str(cfg_path), "--out-ckpt", str(p)]) == 0
    a, b = (_params(p) for p in paths)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    log = [json.loads(line) for line in Path(f"{paths[0]}.log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2]
    assert {"total", "lane2d", "lane3d", "te", "topo_ll", "topo_lt", "direction", "lr"} <= set(log[0])


def test_train_flag_overrides_config(tiny):
    root, cfg_path, scenes = tiny
    ckpt = root / "lr.json"
    assert main(["train", "--scenes", str(scenes), "--config", str(cfg_path), "--steps", "1", "--lr", "0.0",
                 "--weight-decay", "0.0", "--out-ckpt", str(ckpt)]) == 0
    _, meta = ad.load_checkpoint(ckpt)
    assert meta["config"]["lr"] == 0.0 and meta["config"]["steps"] == 1


# -- infer -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tiny):
    root, cfg_path, scenes = tiny
    ckpt = root / "model.json"
    assert main(["train", "--scenes", str(scenes), "--config", str(cfg_path), "--out-ckpt", str(ckpt)]) == 0
    return ckpt


def test_infer_empty_scene_file(tiny, trained, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    out = tmp_path / "pred.jsonl"
    assert main(["infer", "--ckpt", str(trained), "--scenes", str(empty), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_infer_is_deterministic_and_complete(tiny, trained, small_cfg, tmp_path):
    _, _, scenes = tiny
    outs = [tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"]
    for out in outs:
        assert main(["infer", "--ckpt", str(trained), "--scenes", str(scenes), "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    recs = [json.loads(line) for line in outs[0].read_text().splitlines()]
    n = small_cfg.n_lanes * small_cfg.scene.n_cameras
    for r in recs:
        assert len(r["lanes3d"]) == n and len(r["traffic_elements"]) == small_cfg.n_te
        assert len(r["lanes2d"]) == small_cfg.scene.n_cameras
        assert np.shape(r["topology_ll"]) == (n, n) and np.shape(r["topology_lt"]) == (n, small_cfg.n_te)


def test_infer_rejects_mismatched_scenes(trained, tmp_path):
    other = tmp_path / "one_cam.jsonl"
    assert main(["gen-scenes", "--num", "1", "--scene-n-cameras", "1", "--out", str(other)]) == 0
    assert main(["infer", "--ckpt", str(trained), "--scenes", str(other), "--out", str(tmp_path / "p")]) == 2


# -- eval -------------------------------------------------------------------------------------


def _eval(pred, gt, tmp_path):
    out = tmp_path / "report.json"
    code = main(["eval", "--pred", str(pred), "--gt", str(gt), "--out-report", str(out)])
    return code, (json.loads(out.read_text()) if code == 0 else None)


def test_eval_gt_against_gt(tmp_path):
    scenes = tmp_path / "s.jsonl"
    assert main(["gen-scenes", "--num", "4", "--out", str(scenes)]) == 0
    code, r = _eval(scenes, scenes, tmp_path)
    assert code == 0
    for key in ("det_l", "det_l_chamfer", "det_t", "top_ll", "top_lt", "ols", "fscore"):
        assert r[key] == 1.0
    assert r["x_near"] == r["x_far"] == r["z_near"] == r["z_far"] == 0.0
    assert r["format_version"] == 1 and r["thresholds"]["det_t_iou"] == 0.75


def test_eval_empty_prediction_gives_zeros(tmp_path):
    scenes = tmp_path / "s.jsonl"
    assert main(["gen-scenes", "--num", "2", "--out", str(scenes)]) == 0
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, r = _eval(empty, scenes, tmp_path)
    assert code == 0
    for key in ("det_l", "det_l_chamfer", "det_t", "top_ll", "top_lt", "ols", "fscore"):
        assert r[key] == 0.0


def test_eval_scene_id_mismatch(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-scenes", "--num", "2", "--seed", "0", "--out", str(a)]) == 0
    assert main(["gen-scenes", "--num", "2", "--seed", "1", "--out", str(b)]) == 0
    assert main(["eval", "--pred", str(a), "--gt", str(b)]) == 3


def test_eval_hand_built_fixture(tmp_path):
    code, r = _eval(DATA / "eval_pred.jsonl", DATA / "eval_gt.jsonl", tmp_path)
    assert code == 0
    # lanes pooled by score: FP 0.95, TP 0.9, TP 0.9, TP 0.8, FP 0.6 against 4 GT lanes;
    # interpolated precision 3/4 over recall 0 to 3/4 at every distance threshold
    assert r["det_l"] == pytest.approx(0.5625) and r["det_l_chamfer"] == pytest.approx(0.5625)
    assert r["det_t"] == 1.0
    assert r["top_ll"] == 1.0
    # lane-TE: vertex a retrieved (AP 1), vertex b scored 0 (AP 0), vertex c retrieved (AP 1)
    assert r["top_lt"] == pytest.approx(2 / 3)
    assert r["ols"] == pytest.approx(0.25 * (0.5625 + 1 + 1 + math.sqrt(2 / 3)))
    assert r["ols"] == ols(r["det_l"], r["det_t"], r["top_ll"], r["top_lt"])
    # best cut keeps scores >= 0.8: precision 3/4, recall 3/4
    assert r["fscore"] == pytest.approx(0.75) and r["cate_acc"] == 1.0
    assert r["x_near"] == 0.0 and r["z_near"] == 0.0


# -- plot ----------------------------------------------------------------------------------------


def test_plot_gt_only_and_deterministic(tmp_path):
    scenes = tmp_path / "s.jsonl"
    assert main(["gen-scenes", "--num", "1", "--seed", "2", "--out", str(scenes)]) == 0
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    for out in (a, b):
        assert main(["plot", "--scene", str(scenes), "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.startswith("<svg") or text.startswith("<?xml")
    assert "#d62728" in text and 'stroke="#2ca02c" stroke-width="1.5"' not in text


def test_plot_matches_golden_snapshot(tmp_path):
    scenes = tmp_path / "s.jsonl"
    assert main(["gen-scenes", "--num", "1", "--seed", "2", "--out", str(scenes)]) == 0
    out = tmp_path / "fixture.svg"
    # the scene file doubles as a prediction file holding its own GT
    assert main(["plot", "--scene", str(scenes), "--pred", str(scenes), "--out", str(out)]) == 0
    assert out.read_text() == (DATA / "plot_seed2.svg").read_text()


def test_plot_missing_scene_file(tmp_path):
    assert main(["plot", "--scene", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x.svg")]) == 3
