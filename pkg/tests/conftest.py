"""Shared fixtures and the finite-difference gradient checker used across the suite."""
import os

import numpy as np
import pytest

from lanetopo import autodiff as ad
from lanetopo.config import RunConfig
from lanetopo.scene import CONNECT_TOL, SceneConfig, gen_scene


def _log_check(kind, worst):
    """Append one line per passed check when LANETOPO_GRAD_LOG names a file (read by the acceptance suite)."""
    path = os.environ.get("LANETOPO_GRAD_LOG")
    if path:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(f"{kind} {worst:.3e}\n")


def grad_check(build, arrays, h=1e-6, tol=1e-4):
    """Compare autodiff gradients of ``sum(build(*tensors) * w)`` against central differences.

    ``arrays`` are float64 numpy arrays; a fixed random projection ``w`` turns
    the output into a scalar so every output element contributes. Returns the
    worst relative error.
    """
    with ad.double_precision():
        rng = np.random.default_rng(1234)
        tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
        out = build(*tensors)
        w = rng.normal(size=out.shape)
        loss = (out * w).sum()
        loss.backward()

        def f():
            return float((build(*[ad.Tensor(a) for a in arrays]).data * w).sum())

        numeric = ad.numerical_gradient(f, arrays, h=h)
    worst = 0.0
    for t, g in zip(tensors, numeric):
        a = np.zeros_like(g) if t.grad is None else t.grad
        err = np.abs(a - g).max() / max(1.0, np.abs(g).max())
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e}"
    _log_check("op", worst)
    return worst


def param_grad_check(store, loss_fn, names=None, n_entries=6, h=1e-6, tol=1e-4, seed=0):
    """Finite-difference check of a model loss w.r.t. sampled entries of its parameters (float64)."""
    rng = np.random.default_rng(seed)
    store.astype(np.float64)
    with ad.double_precision():
        store.zero_grad()
        loss = loss_fn()
        loss.backward()
        worst = 0.0
        for name in names or list(store.params):
            p = store[name]
            flat = p.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
            analytic = (p.grad.reshape(-1)[idx] if p.grad is not None else np.zeros(len(idx)))
            for k, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(loss_fn().data)
                flat[i] = old - h
                fm = float(loss_fn().data)
                flat[i] = old
                num = (fp - fm) / (2 * h)
                err = abs(num - analytic[k]) / max(1.0, abs(num))
                worst = max(worst, err)
                assert err < tol, f"{name}[{i}]: analytic {analytic[k]:.6e} vs numeric {num:.6e}"
    _log_check("params", worst)
    return worst


def check_scene_invariants(s, cfg):
    """Assert every structural invariant a generated scene must satisfy."""
    x0, x1, y0, y1, z0, z1 = cfg.world_range
    l, t = s.n_lanes, len(s.te_classes)
    assert cfg.min_lanes <= l <= cfg.max_lanes
    assert cfg.min_te <= t <= cfg.max_te
    adj = s.lane_adjacency
    assert adj.shape == (l, l) and not np.diag(adj).any()
    for m in range(l):
        for n in range(l):
            gap = np.linalg.norm(s.lanes3d[m][-1] - s.lanes3d[n][0])
            if adj[m, n]:
                assert gap < CONNECT_TOL
            elif m != n:
                assert gap >= CONNECT_TOL
    for lane in s.lanes3d:
        assert np.all((lane[:, 0] >= x0) & (lane[:, 0] <= x1) & (lane[:, 1] >= y0) & (lane[:, 1] <= y1))
        assert np.all((lane[:, 2] >= z0) & (lane[:, 2] <= z1))
    assert s.lane_te.shape == (l, t)
    assert np.all(s.lane_te.sum(axis=0) >= 1), "every traffic element governs at least one lane"
    assert len(s.features) == cfg.n_cameras
    for cam_maps in s.features:
        for f, (h, w) in zip(cam_maps, cfg.level_shapes()):
            assert f.shape == (cfg.c_in, h, w) and np.all(np.isfinite(f))
    for cam_gt in s.lanes2d_gt:
        for g in cam_gt:
            assert g.points.shape == (cfg.n_points, 2)
            assert np.all((g.points >= 0) & (g.points <= 1))
            assert 0 <= g.source_lane < l


@pytest.fixture(scope="session")
def small_cfg():
    """Tiny model on tiny scenes: fast enough for per-layer gradient checks."""
    scene = SceneConfig(n_cameras=2, image_size=(32, 48), feature_size=(8, 12), levels=2, min_lanes=2,
                        max_lanes=4, max_te=2)
    return RunConfig(dim=8, heads=2, ffn_dim=12, layers_2d=2, layers_3d=2, layers_te=2, n_lanes=3, n_te=3,
                     sample_points=2, depth_bins=3, scene=scene)


@pytest.fixture(scope="session")
def small_scenes(small_cfg):
    return [gen_scene(s, small_cfg.scene) for s in (3, 4)]


@pytest.fixture(scope="session")
def default_scenes():
    cfg = SceneConfig()
    return [gen_scene(s, cfg) for s in range(4)]


# acceptance criterion number -> summary line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
