"""Small reverse-mode automatic differentiation engine on top of numpy.

Every operation records a closure mapping the output gradient to the
gradients of its inputs. ``Tensor.backward`` walks the graph in reverse
topological order. Tensors default to float32; :func:`double_precision`
switches newly created tensors to float64 (used by gradient checks).

Broadcasting is limited to what numpy does for ``add``/``mul``/``sub``/``div``
and batched ``matmul``; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import contextlib
import json
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def double_precision():
    """Create float64 tensors inside the block."""
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root):
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _make(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise ops --------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def maximum(a, b):
    a, b = _pair(a, b)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(out, (a, b), backward)


def minimum(a, b):
    a, b = _pair(a, b)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(out, (a, b), backward)


def relu(x):
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def sigmoid(x):
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward)


def _sigmoid_np(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def log(x):
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), backward)


def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward)


# -- shape ops -------------------------------------------------------------

def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), backward)


def _is_basic_index(index):
    """True when ``index`` cannot select an element twice (slices and integers only)."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def getitem(x, index):
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(tensors), backward)


def tensor_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis, keepdims) * (1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the affine map."""
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a last axis of size > 1")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gdat = 1.0 if gamma is None else gamma.data
    out = xhat * gdat
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        dxhat = g * gdat
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(x.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), tuple(parents), backward)


def multi_head_attention(q, k, v, weights: Mapping[str, Tensor], heads: int):
    """Scaled dot-product attention with ``heads`` heads and in/out projections.

    ``q`` is (..., Nq, C); ``k`` and ``v`` are (..., Nk, C). ``weights`` holds
    ``q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b`` with weights stored (in, out).
    """
    c = q.shape[-1]
    if c % heads:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    d = c // heads

    def split(x, w, b):
        y = x @ weights[w] + weights[b]
        lead = y.shape[:-2]
        y = y.reshape(*lead, y.shape[-2], heads, d)
        nd = y.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return y.transpose(perm)

    qh = split(q, "q_w", "q_b")
    kh = split(k, "k_w", "k_b")
    vh = split(v, "v_w", "v_b")
    nd = kh.ndim
    kt = kh.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    attn = softmax((qh @ kt) * (1.0 / math.sqrt(d)), axis=-1)
    ctx = attn @ vh
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    ctx = ctx.transpose(perm)
    ctx = ctx.reshape(*ctx.shape[:-2], c)
    return ctx @ weights["o_w"] + weights["o_b"]


def grid_sample(feature, points):
    """Bilinear sampling of a batch of channel-last maps.

    ``feature`` is (B, H, W, C); ``points`` is (B, N, 2) holding normalised
    (x, y) in [0, 1]^2 where pixel centres sit at ((i + 0.5) / W, (j + 0.5) / H).
    Corners outside the map contribute zero. Returns (B, N, C).
    """
    feature = as_tensor(feature)
    points = as_tensor(points, feature)
    fd = feature.data
    b, h, w, c = fd.shape
    pts = points.data
    n = pts.shape[1]
    px = pts[..., 0] * w - 0.5
    py = pts[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(fd.dtype)
    fy = (py - y0).astype(fd.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.broadcast_to(np.arange(b)[:, None], (b, n))
    corners = ((0, 0), (1, 0), (0, 1), (1, 1))
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    flat = fd.reshape(b * h * w, c)
    idxs, vals, valids = [], [], []
    out = np.zeros((b, n, c), dtype=fd.dtype)
    for (dx, dy), wt in zip(corners, weights):
        xc, yc = x0 + dx, y0 + dy
        valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        idx = (bidx * h + np.clip(yc, 0, h - 1)) * w + np.clip(xc, 0, w - 1)
        val = flat[idx] * valid[..., None]
        out += wt[..., None] * val
        idxs.append(idx)
        vals.append(val)
        valids.append(valid)

    def backward(g):
        gf = gp = None
        if feature.requires_grad:
            all_idx = np.concatenate([i.ravel() for i in idxs])
            coef = np.concatenate([(wt * vd).ravel() for wt, vd in zip(weights, valids)])
            g4 = np.tile(g.reshape(-1, c), (4, 1)) * coef[:, None]
            gflat = np.empty((b * h * w, c), dtype=fd.dtype)
            for ch in range(c):
                gflat[:, ch] = np.bincount(all_idx, weights=g4[:, ch], minlength=b * h * w)
            gf = gflat.reshape(fd.shape)
        if points.requires_grad:
            s = [(g * v).sum(-1) for v in vals]
            dfx = (s[1] - s[0]) * (1 - fy) + (s[3] - s[2]) * fy
            dfy = (s[2] - s[0]) * (1 - fx) + (s[3] - s[1]) * fx
            gp = np.stack([dfx * w, dfy * h], axis=-1).astype(pts.dtype)
        return gf, gp

    return _make(out, (feature, points), backward)


def bilinear_sample(feature, points):
    """Sample a (C, H, W) map at (N, 2) normalised points, returning (N, C)."""
    feature = as_tensor(feature)
    c, h, w = feature.shape
    fm = feature.transpose(1, 2, 0).reshape(1, h, w, c)
    out = grid_sample(fm, as_tensor(points, feature).reshape(1, -1, 2))
    return out.reshape(-1, c)


# -- parameters and optimisation ---------------------------------------------

def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class ParameterStore:
    """Named parameters plus AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, data):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = parameter(data, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_values(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        """Convert every parameter in place (e.g. float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        self.m.clear()
        self.v.clear()

    def state(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint parameters differ: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype)


def adamw_step(store: ParameterStore, lr, betas=(0.9, 0.999), weight_decay=0.01,
               eps=1e-8, grads: Mapping[str, np.ndarray] | None = None):
    """One decoupled-weight-decay Adam update with bias correction."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return store


def clip_grad_norm(store: ParameterStore, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in store.params.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in store.params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    if total_steps <= 0:
        raise ConfigError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, store: ParameterStore, seed: int, extra: Mapping | None = None):
    doc = {"format_version": 1, "step": int(store.step), "seed": int(seed)}
    if extra:
        doc.update(extra)
    for name, p in store.params.items():
        doc[name] = {"shape": list(p.shape), "data": p.data.ravel().tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return (params dict of arrays, metadata dict)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params, meta = {}, {}
    for key, val in doc.items():
        if isinstance(val, dict) and "shape" in val and "data" in val:
            params[key] = np.asarray(val["data"], dtype=np.float32).reshape(val["shape"])
        else:
            meta[key] = val
    return params, meta


def numerical_gradient(f: Callable[[], float], arrays: Iterable[np.ndarray], h=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. each array (in place perturbation)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
