import numpy as np
import pytest

from conftest import check_scene_invariants

from lanetopo.errors import ConfigError, DataError
from lanetopo.geometry import Camera, clip_polyline_to_view, polyline_length
from lanetopo.scene import (Scene, SceneConfig, derive_2d_gt, dumps_scene, gen_scene,
                            rasterize_features, read_scenes, scene_from_dict, scene_to_dict, write_scenes)


def manual_scene(lanes, cameras):
    n = len(lanes)
    return Scene("manual", 0, cameras, [np.asarray(l, dtype=np.float64) for l in lanes], [0] * n,
                 np.zeros((n, n), dtype=bool), np.zeros((0, 4)), [], np.zeros((n, 0), dtype=bool))


def front_camera():
    return Camera.looking((0.0, 0.0, 1.6), 0.0, 0.05, (96, 160), fov_deg=100)


def test_same_seed_same_bytes():
    assert dumps_scene(gen_scene(11)) == dumps_scene(gen_scene(11))
    assert dumps_scene(gen_scene(11)) != dumps_scene(gen_scene(12))


def test_single_lane_no_traffic_elements():
    cfg = SceneConfig(min_lanes=1, max_lanes=1, min_te=0, max_te=0)
    scene = gen_scene(0, cfg)
    assert scene.n_lanes == 1
    assert not scene.lane_adjacency.any()
    assert scene.lane_te.shape == (1, 0)


def test_infeasible_config_raises():
    with pytest.raises(ConfigError):
        SceneConfig(min_lanes=5, max_lanes=3)
    with pytest.raises(ConfigError):
        SceneConfig(n_cameras=0)
    with pytest.raises(ConfigError):
        SceneConfig(feature_size=(4, 4), levels=4)


def test_invariant_sweep_100_scenes():
    cfg = SceneConfig()
    for seed in range(100):
        check_scene_invariants(gen_scene(seed, cfg), cfg)


def test_successor_lanes_are_c1_at_the_joint():
    for seed in range(30):
        s = gen_scene(seed)
        for m, n in zip(*np.nonzero(s.lane_adjacency)):
            a, b = s.lanes3d[m], s.lanes3d[n]
            assert np.array_equal(a[-1], b[0])
            ta = (a[-1] - a[-2]) / np.linalg.norm(a[-1] - a[-2])
            tb = (b[1] - b[0]) / np.linalg.norm(b[1] - b[0])
            assert np.dot(ta, tb) > 0.95


def test_lane_behind_camera_has_no_2d_gt():
    scene = manual_scene([[(-20.0, 0.0, 0.0), (-5.0, 0.0, 0.0)]], [front_camera()])
    assert derive_2d_gt(scene) == [[]]


def test_lane_visible_in_one_camera():
    back = Camera.looking((0.0, 0.0, 1.6), np.pi, 0.05, (96, 160), fov_deg=100)
    scene = manual_scene([[(8.0, 0.0, 0.0), (30.0, 0.0, 0.0)]], [front_camera(), back])
    gt = derive_2d_gt(scene)
    assert len(gt[0]) == 1 and gt[0][0].source_lane == 0
    assert gt[1] == []


def test_straight_lane_matches_hand_projection():
    # identity-rotation camera looking down +z with the lane fully in view
    k = np.array([[100.0, 0, 80.0], [0, 100.0, 48.0], [0, 0, 1]])
    cam = Camera(k, np.eye(4), (96, 160))
    lane = np.array([(-1.0, 0.5, 4.0), (1.0, 0.5, 4.0)])  # constant depth: image-space spacing is uniform
    gt = derive_2d_gt(manual_scene([lane], [cam]), n_points=5)
    expected = [((80 + 100 * x / 4) / 160, (48 + 100 * 0.5 / 4) / 96) for x in np.linspace(-1, 1, 5)]
    np.testing.assert_allclose(gt[0][0].points, expected, atol=1e-6)


def test_features_without_lanes_are_empty():
    cfg = SceneConfig(min_te=0, max_te=0)
    scene = manual_scene([], [front_camera()])
    scene.lanes3d = []
    maps = rasterize_features(scene, cfg, np.random.default_rng(0))
    for f in maps[0]:
        assert np.all(f[0] == 0) and np.all(f[2:2 + cfg.num_lane_classes] == 0)


def test_lane_pixel_has_zero_distance():
    scene = gen_scene(5)
    f = scene.features[0][0]
    on_lane = f[0] >= 0.5
    assert on_lane.any()
    assert np.all(f[1][on_lane] == 0)


def test_occupancy_tracks_visible_arc_length():
    cfg = SceneConfig()
    fh, fw = cfg.level_shapes()[0]
    for seed in range(10):
        s = gen_scene(seed, cfg)
        occ = sum(float(s.features[c][0][0].sum()) for c in range(cfg.n_cameras))
        length = 0.0
        for cam in s.cameras:
            ih, iw = cam.image_size
            for lane in s.lanes3d:
                for run in clip_polyline_to_view(cam, lane, cfg.n_points):
                    length += polyline_length(run * [fw / iw, fh / ih])
        assert abs(occ - length) <= 0.2 * length


def test_scene_file_round_trip(tmp_path):
    scenes = [gen_scene(s) for s in (1, 2)]
    path = tmp_path / "scenes.jsonl"
    write_scenes(path, scenes)
    back = read_scenes(path)
    assert [dumps_scene(s) for s in back] == [dumps_scene(s) for s in scenes]
    for a, b in zip(scenes, back):
        for fa, fb in zip(a.features[0], b.features[0]):
            assert fa.tobytes() == fb.tobytes()


def test_scene_reader_rejects_bad_records(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format_version": 99}\n')
    with pytest.raises(DataError):
        read_scenes(path)
    d = scene_to_dict(gen_scene(0))
    d["traffic_elements"][0]["lanes"] = [999]
    with pytest.raises(DataError):
        scene_from_dict(d)
