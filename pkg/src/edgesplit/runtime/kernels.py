"""float32 operator kernels.

Every kernel fixes the accumulation order of each output element (a plain
serial loop over the reduction indices), and parallel execution only splits
independent output channels/features between workers. Results are therefore
bit-identical for any ``num_threads``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import ShapeError, UnsupportedOp
from ..model import TensorSpec, add_compatible, concat_axis, layer_output_shape, window_params

F32 = np.float32


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    step, extra = divmod(n, parts)
    lo = 0
    for i in range(parts):
        hi = lo + step + (1 if i < extra else 0)
        yield lo, hi
        lo = hi


def _parallel(fn, n: int, num_threads: int, pool=None) -> None:
    """Run ``fn(lo, hi)`` over a partition of ``range(n)``."""
    ranges = list(_chunks(n, num_threads))
    if len(ranges) == 1:
        fn(*ranges[0])
        return
    if pool is None:
        with ThreadPoolExecutor(len(ranges)) as ex:
            list(ex.map(lambda r: fn(*r), ranges))
    else:
        list(pool.map(lambda r: fn(*r), ranges))


def _pad(x, p, value):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)), constant_values=value)


def conv2d(x, w, b, stride, padding, num_threads=1, pool=None):
    _, c, h, wd = x.shape
    co, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = _pad(x[0], padding, 0.0)
    out = np.empty((co, oh, ow), dtype=F32)
    span_h, span_w = stride * (oh - 1) + 1, stride * (ow - 1) + 1

    def run(lo, hi):
        acc = np.zeros((hi - lo, oh, ow), dtype=F32)
        for ci in range(c):
            for kh in range(k):
                for kw in range(k):
                    patch = xp[ci, kh : kh + span_h : stride, kw : kw + span_w : stride]
                    acc += w[lo:hi, ci, kh, kw, None, None] * patch
        acc += b[lo:hi, None, None]
        out[lo:hi] = acc

    _parallel(run, co, num_threads, pool)
    return out[None]


def _pool2d(x, k, stride, padding, mode, num_threads=1, pool=None):
    _, c, h, wd = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = _pad(x[0], padding, -np.inf if mode == "max" else 0.0)
    out = np.empty((c, oh, ow), dtype=F32)
    span_h, span_w = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    area = F32(k * k)

    def run(lo, hi):
        acc = None
        for kh in range(k):
            for kw in range(k):
                win = xp[lo:hi, kh : kh + span_h : stride, kw : kw + span_w : stride]
                if acc is None:
                    acc = win.astype(F32, copy=True)
                elif mode == "max":
                    np.maximum(acc, win, out=acc)
                else:
                    acc += win
        out[lo:hi] = acc if mode == "max" else acc / area

    _parallel(run, c, num_threads, pool)
    return out[None]


def global_avg_pool(x, num_threads=1, pool=None):
    _, c, h, w = x.shape
    flat = x[0].reshape(c, h * w)
    out = np.empty((c,), dtype=F32)
    n = F32(h * w)

    def run(lo, hi):
        acc = np.zeros(hi - lo, dtype=F32)
        for j in range(h * w):
            acc += flat[lo:hi, j]
        out[lo:hi] = acc / n

    _parallel(run, c, num_threads, pool)
    return out.reshape(1, c, 1, 1)


def fully_connected(x, w, b, num_threads=1, pool=None):
    v = x.reshape(-1)
    nout, nin = w.shape
    out = np.empty((nout,), dtype=F32)

    def run(lo, hi):
        acc = np.zeros(hi - lo, dtype=F32)
        for i in range(nin):
            acc += w[lo:hi, i] * v[i]
        acc += b[lo:hi]
        out[lo:hi] = acc

    _parallel(run, nout, num_threads, pool)
    return out[None]


def batch_norm(x, scale, bias, mean, var, eps, num_threads=1, pool=None):
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    inv = scale / np.sqrt(var + F32(eps))
    out = np.empty_like(x)

    def run(lo, hi):
        sl = (slice(None), slice(lo, hi))
        out[sl] = (x[sl] - mean.reshape(bshape)[sl]) * inv.reshape(bshape)[sl] + bias.reshape(bshape)[sl]

    _parallel(run, c, num_threads, pool)
    return out


def softmax(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = np.zeros_like(e[:, :1])
    for j in range(e.shape[1]):
        s += e[:, j : j + 1]
    return e / s


def relu(x):
    return np.maximum(x, F32(0))


def add(xs):
    acc = np.array(xs[0], dtype=F32, copy=True)
    for other in xs[1:]:
        acc += other.reshape(acc.shape)
    return acc


def execute_layer(layer, inputs, weights, num_threads: int = 1, pool=None) -> np.ndarray:
    """Evaluate one layer on float32 input arrays.

    ``weights`` is anything indexable by weight-ref name (a WeightStore works).
    """
    op = layer.op
    specs = []
    for x in inputs:
        if not isinstance(x, np.ndarray) or x.dtype != F32:
            raise ShapeError(layer.name, "inputs must be float32 arrays")
        specs.append(TensorSpec(x.shape))
    if op == "Add":
        for s in specs[1:]:
            if not add_compatible(specs[0].dims, s.dims):
                raise ShapeError(layer.name, f"Add operands differ: {list(specs[0].dims)} vs {list(s.dims)}")
    if op == "Input":
        raise UnsupportedOp(f"{layer.name}: Input layers are read, not executed")

    class _Specs:  # adapter so layer_output_shape can read weight dims
        def spec(self, name):
            return TensorSpec(weights[name].shape)

    expected = layer_output_shape(layer, specs, _Specs())
    x = inputs[0] if inputs else None
    w = [weights[r] for r in layer.weight_refs]

    if op in ("Output",):
        y = x.copy()
    elif op == "ReLU":
        y = relu(x)
    elif op == "Conv2D":
        _, s, p = window_params(layer)
        y = conv2d(x, w[0], w[1], s, p, num_threads, pool)
    elif op in ("MaxPool2D", "AvgPool2D"):
        k, s, p = window_params(layer)
        y = _pool2d(x, k, s, p, "max" if op == "MaxPool2D" else "avg", num_threads, pool)
    elif op == "GlobalAvgPool2D":
        y = global_avg_pool(x, num_threads, pool)
    elif op == "FullyConnected":
        y = fully_connected(x, w[0], w[1], num_threads, pool)
    elif op == "BatchNorm":
        y = batch_norm(x, *w, layer.attrs.get("epsilon", 1e-5), num_threads, pool)
    elif op == "Softmax":
        y = softmax(x)
    elif op == "Flatten":
        y = x.reshape(1, -1).copy()
    elif op == "Add":
        y = add(inputs)
    elif op == "Concat":
        y = np.concatenate(inputs, axis=concat_axis(layer, x.ndim))
    else:
        raise UnsupportedOp(f"{layer.name}: unsupported op {op!r}")
    if y.shape != expected.dims:
        raise ShapeError(layer.name, f"kernel produced {list(y.shape)}, expected {list(expected.dims)}")
    return np.ascontiguousarray(y, dtype=F32)
