import math

import numpy as np
import pytest

from lanetopo import autodiff as ad
from lanetopo.errors import ConfigError, ShapeError, TrainingError
from lanetopo.nn import MultiHeadAttention

from conftest import grad_check

SEEDS = range(8)


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- forward examples ----------------------------------------------------------

def test_matmul_identity_and_projector():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(T(np.eye(2)), T(a)).data, a)
    out = ad.matmul(T([[1.0, 0.0], [0.0, 0.0]]), T([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-9)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=20, size=(50, 7)).astype(np.float32)
    out = ad.softmax(ad.Tensor(x), axis=-1).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    np.testing.assert_allclose(ad.layer_norm(T([[3.0, 3.0, 3.0]])).data, [[0, 0, 0]], atol=1e-12)
    out = ad.layer_norm(T([[1.0, -1.0]]), T([1.0, 1.0]), T([0.0, 0.0])).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_row_statistics():
    x = np.random.default_rng(1).normal(loc=3, scale=5, size=(40, 9))
    out = ad.layer_norm(T(x)).data
    assert np.abs(out.mean(-1)).max() < 1e-5
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-5 * 9)


def test_layer_norm_rejects_width_one():
    with pytest.raises(ShapeError):
        ad.layer_norm(T([[1.0]]))


def _mha_weights(rng, c):
    return {f"{p}_{s}": T(rng.normal(size=(c, c)) if s == "w" else rng.normal(size=c), True)
            for p in "qkvo" for s in "wb"}


def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(2)
    w = _mha_weights(rng, 8)
    k = T(rng.normal(size=(1, 8)))
    v = T(rng.normal(size=(1, 8)))
    a = ad.multi_head_attention(T(rng.normal(size=(3, 8))), k, v, w, 2).data
    b = ad.multi_head_attention(T(rng.normal(size=(3, 8))), k, v, w, 2).data
    expected = (v.data @ w["v_w"].data + w["v_b"].data) @ w["o_w"].data + w["o_b"].data
    np.testing.assert_allclose(a, np.repeat(expected, 3, axis=0), atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_identical_keys_uniform():
    rng = np.random.default_rng(3)
    w = _mha_weights(rng, 8)
    k = T(np.repeat(rng.normal(size=(1, 8)), 5, axis=0))
    v = T(rng.normal(size=(5, 8)))
    a = ad.multi_head_attention(T(rng.normal(size=(2, 8))), k, v, w, 4).data
    b = ad.multi_head_attention(T(rng.normal(size=(2, 8)) * 10), k, v, w, 4).data
    np.testing.assert_allclose(a, b, atol=1e-10)
    mean_v = (v.data @ w["v_w"].data + w["v_b"].data).mean(0)
    np.testing.assert_allclose(a[0], mean_v @ w["o_w"].data + w["o_b"].data, atol=1e-10)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError):
        ad.multi_head_attention(T(np.ones((2, 6))), T(np.ones((2, 6))), T(np.ones((2, 6))),
                                _mha_weights(np.random.default_rng(0), 6), 4)
    with pytest.raises(ConfigError):
        MultiHeadAttention(ad.ParameterStore(), "a", 6, 4, np.random.default_rng(0))


def test_bilinear_sample_lattice_and_midpoint():
    feat = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    # centre of cell (row 1, col 2) in normalised coordinates
    p = [[(2 + 0.5) / 4, (1 + 0.5) / 3]]
    np.testing.assert_allclose(ad.bilinear_sample(T(feat), T(p)).data[0], feat[:, 1, 2])
    mid = [[(2 + 1.0) / 4, (1 + 0.5) / 3]]  # halfway between columns 2 and 3
    np.testing.assert_allclose(ad.bilinear_sample(T(feat), T(mid)).data[0], feat[:, 1, 2:4].mean(-1))


def test_bilinear_sample_out_of_bounds_is_zero():
    feat = np.ones((1, 4, 4))
    out = ad.bilinear_sample(T(feat), T([[-1.0, 0.5], [0.5, 2.0], [5.0, 5.0]])).data
    np.testing.assert_array_equal(out, 0.0)


# -- gradient checks (double precision) ------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    grad_check(ad.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    rng = np.random.default_rng(100 + seed)
    grad_check(lambda x: ad.softmax(x, axis=-1), [rng.normal(size=(3, 5))])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(200 + seed)
    grad_check(ad.layer_norm, [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_attention(seed):
    rng = np.random.default_rng(300 + seed)
    names = [f"{p}_{s}" for p in "qkvo" for s in "wb"]
    arrays = [rng.normal(size=(4, 8)) for _ in range(3)]
    arrays += [rng.normal(scale=0.5, size=(8, 8)) if n.endswith("w") else rng.normal(size=8) for n in names]

    def f(q, k, v, *w):
        return ad.multi_head_attention(q, k, v, dict(zip(names, w)), 2)

    grad_check(f, arrays)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bilinear_sample(seed):
    rng = np.random.default_rng(400 + seed)
    feat = rng.normal(size=(3, 5, 6))
    # keep samples away from cell boundaries, where bilinear weights have kinks
    cells = rng.integers(0, [6, 5], size=(7, 2))
    pts = (cells + 0.5 + rng.uniform(0.05, 0.45, size=(7, 2)) * rng.choice([-1, 1], size=(7, 2))) / [6, 5]
    grad_check(ad.bilinear_sample, [feat, pts])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    rng = np.random.default_rng(500 + seed)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))

    def f(x, y):
        z = ad.concat([ad.relu(x) * y, ad.sigmoid(x) / y, ad.log(y) + ad.exp(x * 0.3)], axis=0)
        return ad.mean(ad.sqrt(y) * z[:3] - z[3:6] + z[6:], axis=0)

    # relu has a kink at zero; nudge entries away from it
    a[np.abs(a) < 1e-3] = 0.1
    grad_check(f, [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_indexing_and_stack(seed):
    rng = np.random.default_rng(600 + seed)
    x = rng.normal(size=(5, 4))
    idx = np.array([0, 2, 2, 4])

    def f(t):
        return ad.stack([t[idx].sum(axis=0), t[1:3].mean(axis=0), ad.absolute(t[4]) + 1.0], axis=0)

    x[np.abs(x) < 1e-3] = 0.2
    grad_check(f, [x])


# -- optimiser, schedule, checkpoints ----------------------------------------

def _scalar_store(value):
    store = ad.ParameterStore()
    with ad.double_precision():
        store.add("p", np.array([value]))
    return store


def test_adamw_zero_gradient_no_decay_is_identity():
    store = _scalar_store(1.5)
    ad.adamw_step(store, 0.1, weight_decay=0.0, grads={"p": np.zeros(1)})
    assert store["p"].data[0] == 1.5


def test_adamw_first_step_closed_form():
    store = _scalar_store(1.0)
    ad.adamw_step(store, 0.1, betas=(0.9, 0.999), weight_decay=0.0, grads={"p": np.ones(1)})
    # bias-corrected m/sqrt(v) is exactly 1 on the first step, so p = 1 - 0.1 * 1 / (1 + eps)
    assert store["p"].data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert store["p"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_weight_decay_shrink():
    store = _scalar_store(2.0)
    ad.adamw_step(store, 0.1, weight_decay=0.0, grads={"p": np.ones(1)})  # warm step fills the moments
    store.m["p"][:] = 0.0
    store.v["p"][:] = 0.0
    lr, wd = 0.05, 0.01
    for _ in range(5):
        before = store["p"].data[0]
        ad.adamw_step(store, lr, weight_decay=wd, grads={"p": np.zeros(1)})
        assert store["p"].data[0] == pytest.approx(before * (1 - lr * wd), rel=1e-12)


def test_adamw_nan_gradient_names_parameter():
    store = _scalar_store(1.0)
    with pytest.raises(TrainingError, match="'p'"):
        ad.adamw_step(store, 0.1, grads={"p": np.array([np.nan])})


def test_cosine_lr():
    assert ad.cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert ad.cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert ad.cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    assert ad.cosine_lr(25, 100, 2.0, 0.0) == pytest.approx(1.0 + math.cos(math.pi / 4))
    with pytest.raises(ConfigError):
        ad.cosine_lr(0, 0, 1.0)


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(7)
    store = ad.ParameterStore()
    store.add("a.weight", rng.normal(size=(3, 4)))
    store.add("a.bias", rng.normal(size=4) * 1e-7)
    store.step = 12
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, store, seed=5)
    params, meta = ad.load_checkpoint(path)
    assert meta["step"] == 12 and meta["seed"] == 5
    for name, p in store.items():
        assert params[name].dtype == p.data.dtype
        np.testing.assert_array_equal(params[name], p.data)


def test_parameter_names_unique():
    store = ad.ParameterStore()
    store.add("x", np.zeros(2))
    with pytest.raises(ConfigError):
        store.add("x", np.zeros(2))


def test_xavier_init_is_seeded():
    a = ad.xavier_uniform(np.random.default_rng(3), 8, 16)
    b = ad.xavier_uniform(np.random.default_rng(3), 8, 16)
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() <= math.sqrt(6 / 24)
