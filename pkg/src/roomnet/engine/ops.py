"""Differentiable operations.

Each op computes its forward value with numpy and, when a tape is active,
records a module-level backward rule ``_<op>_grad(g, ctx)`` that returns one
gradient (or None) per input.  Rules are looked up at call time so they can
be swapped out in tests.

Convolution is cross-correlation (no kernel flip).  Max pooling breaks ties
toward the lowest flat index.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from roomnet.engine.tensor import Tensor, as_tensor, log_decision, record
from roomnet.errors import CorruptedIndicesError, InvalidArgumentError

#: names of every op with a backward rule; the gradient checker sweeps this.
DIFFERENTIABLE_OPS: list[str] = []


def differentiable(name: str):
    def deco(fn):
        if name not in DIFFERENTIABLE_OPS:
            DIFFERENTIABLE_OPS.append(name)
        return fn
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tensor_pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    else:
        a = as_tensor(a, dtype=b.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def _add_grad(g, ctx):
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(g, ctx["b_shape"])


@differentiable("add")
def add(a, b) -> Tensor:
    a, b = _tensor_pair(a, b)
    out = Tensor(a.data + b.data, dtype=a.dtype)
    return record("add", (a, b), out, _add_grad, a_shape=a.shape, b_shape=b.shape)


def _sub_grad(g, ctx):
    return _unbroadcast(g, ctx["a_shape"]), -_unbroadcast(g, ctx["b_shape"])


@differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = _tensor_pair(a, b)
    out = Tensor(a.data - b.data, dtype=a.dtype)
    return record("sub", (a, b), out, _sub_grad, a_shape=a.shape, b_shape=b.shape)


def _mul_grad(g, ctx):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@differentiable("mul")
def mul(a, b) -> Tensor:
    a, b = _tensor_pair(a, b)
    out = Tensor(a.data * b.data, dtype=a.dtype)
    return record("mul", (a, b), out, _mul_grad, a=a.data, b=b.data)


def _sum_grad(g, ctx):
    return (np.broadcast_to(g.reshape(()), ctx["shape"]).copy(),)


@differentiable("sum")
def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(np.sum(x.data).reshape(()), dtype=x.dtype)
    return record("sum", (x,), out, _sum_grad, shape=x.shape)


def _reshape_grad(g, ctx):
    return (g.reshape(ctx["shape"]),)


@differentiable("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    return record("reshape", (x,), out, _reshape_grad, shape=x.shape)


def _concat_grad(g, ctx):
    return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


@differentiable("concat")
def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis), dtype=xs[0].dtype)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return record("concat", xs, out, _concat_grad, splits=splits, axis=axis)


def _relu_grad(g, ctx):
    return (g * ctx["mask"],)


@differentiable("relu")
def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = log_decision(x.data > 0)
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype), dtype=x.dtype)
    return record("relu", (x,), out, _relu_grad, mask=mask)


# ---------------------------------------------------------------- convolution

def _conv_out(size: int, k: int, stride: int, pad: int, dim: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise InvalidArgumentError(
            f"conv2d: {dim}={size} with kernel {k}, pad {pad}, stride {stride} gives a non-integral output")
    return span // stride + 1


def _conv2d_grad(g, ctx):
    cols, w, x_shape = ctx["cols"], ctx["w"], ctx["x_shape"]
    stride, pad = ctx["stride"], ctx["pad"]
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


@differentiable("conv2d")
def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with filters ``w`` (F,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidArgumentError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise InvalidArgumentError(f"conv2d: input channels C={c} but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise InvalidArgumentError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if b is not None and b.shape != (f,):
        raise InvalidArgumentError(f"conv2d: bias shape {b.shape} does not match F={f}")
    ho = _conv_out(h, kh, stride, pad, "H")
    wo = _conv_out(wd, kw, stride, pad, "W")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    y = cols @ w.data.reshape(f, -1).T
    if b is not None:
        y = y + b.data
    out = Tensor(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), dtype=x.dtype)
    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, _conv2d_grad, cols=cols, w=w.data,
                  x_shape=x.shape, stride=stride, pad=pad)


# ---------------------------------------------------------------- pooling

def _scatter(values: np.ndarray, indices: np.ndarray, out_shape: tuple) -> np.ndarray:
    n, c, h, w = out_shape
    out = np.zeros((n, c, h * w), dtype=values.dtype)
    np.put_along_axis(out, indices.reshape(n, c, -1), values.reshape(n, c, -1), axis=2)
    return out.reshape(out_shape)


def _gather(g: np.ndarray, indices: np.ndarray) -> np.ndarray:
    n, c = g.shape[:2]
    return np.take_along_axis(g.reshape(n, c, -1), indices.reshape(n, c, -1), axis=2).reshape(indices.shape)


def _max_pool2d_grad(g, ctx):
    return (_scatter(g, ctx["indices"], ctx["x_shape"]),)


@differentiable("max_pool2d")
def max_pool2d_indices(x: Tensor, k: int = 2) -> tuple[Tensor, np.ndarray]:
    """k×k max pooling; also returns the flat (row-major, per-plane) argmax of each window."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise InvalidArgumentError(f"max_pool2d: H={h}, W={w} not divisible by k={k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = log_decision(win.argmax(axis=-1))
    vals = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * k + arg // k
    cols = np.arange(wo)[None, :] * k + arg % k
    indices = (rows * w + cols).astype(np.int64)
    out = Tensor(vals, dtype=x.dtype)
    record("max_pool2d", (x,), out, _max_pool2d_grad, indices=indices, x_shape=x.shape)
    return out, indices


def _max_unpool2d_grad(g, ctx):
    return (_gather(g, ctx["indices"]),)


@differentiable("max_unpool2d")
def max_unpool2d(y: Tensor, indices: np.ndarray, out_shape: Sequence[int]) -> Tensor:
    """Write each value of ``y`` at its saved argmax position; zeros elsewhere."""
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 4 or out_shape[:2] != y.shape[:2]:
        raise InvalidArgumentError(f"max_unpool2d: out_shape {out_shape} incompatible with input {y.shape}")
    if indices.shape != y.shape:
        raise CorruptedIndicesError(f"indices shape {indices.shape} does not match values {y.shape}")
    plane = out_shape[2] * out_shape[3]
    if indices.size and (indices.min() < 0 or indices.max() >= plane):
        raise CorruptedIndicesError(f"pooling index outside [0, {plane})")
    out = Tensor(_scatter(y.data, indices, out_shape), dtype=y.dtype)
    return record("max_unpool2d", (y,), out, _max_unpool2d_grad, indices=indices)


def _upsample_nearest_grad(g, ctx):
    f = ctx["factor"]
    n, c, h, w = g.shape
    return (g.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


@differentiable("upsample_nearest")
def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3), dtype=x.dtype)
    return record("upsample_nearest", (x,), out, _upsample_nearest_grad, factor=factor)


# ---------------------------------------------------------------- normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batch_norm_train_grad(g, ctx):
    xhat, invstd, gamma = ctx["xhat"], ctx["invstd"], ctx["gamma"]
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (invstd[None, :, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
    return dx, dgamma, dbeta


def _batch_norm_eval_grad(g, ctx):
    xhat, invstd, gamma = ctx["xhat"], ctx["invstd"], ctx["gamma"]
    dx = g * (gamma * invstd)[None, :, None, None]
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


@differentiable("batch_norm2d")
def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, train: bool = True,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics are used and the running statistics
    (updated in place) track them with the given momentum; the running
    variance uses the unbiased estimate.  Eval mode uses the running stats.
    """
    if x.ndim != 4 or x.shape[0] == 0:
        raise InvalidArgumentError(f"batch_norm2d needs a non-empty (N,C,H,W) batch, got {x.shape}")
    g_, b_ = gamma.data, beta.data
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = Tensor(xhat * g_[None, :, None, None] + b_[None, :, None, None], dtype=x.dtype)
    rule = _batch_norm_train_grad if train else _batch_norm_eval_grad
    return record("batch_norm2d", (x, gamma, beta), out, rule,
                  xhat=xhat.astype(x.dtype), invstd=invstd.astype(x.dtype), gamma=g_)


def _dropout_grad(g, ctx):
    return (g * ctx["scale"],)


@differentiable("dropout")
def dropout(x: Tensor, p: float = 0.5, train: bool = True, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("dropout in train mode needs an rng")
    scale = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    out = Tensor(x.data * scale, dtype=x.dtype)
    return record("dropout", (x,), out, _dropout_grad, scale=scale)


# ---------------------------------------------------------------- dense + losses

def _fc_grad(g, ctx):
    x, w = ctx["x"], ctx["w"]
    return g @ w.T, x.T @ g, g.sum(axis=0)


@differentiable("fully_connected")
def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise InvalidArgumentError(f"fully_connected: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise InvalidArgumentError(f"fully_connected: bias {b.shape} does not match M={w.shape[1]}")
    out = Tensor(x.data @ w.data + b.data, dtype=x.dtype)
    return record("fully_connected", (x, w, b), out, _fc_grad, x=x.data, w=w.data)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softmax_ce_grad(g, ctx):
    probs, targets = ctx["probs"], ctx["targets"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), targets] -= 1.0
    return (g * d / n,)


@differentiable("softmax_cross_entropy")
def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise InvalidArgumentError(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise InvalidArgumentError(f"softmax_cross_entropy: target outside [0, {k - 1}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()
    out = Tensor(np.asarray(loss).reshape(()), dtype=logits.dtype)
    return record("softmax_cross_entropy", (logits,), out, _softmax_ce_grad,
                  probs=np.exp(logp), targets=targets)


def _weighted_sse_grad(g, ctx):
    # weight applied last: a cell's gradient is exactly weight x its unweighted value
    return (ctx["weight"] * (g * 2.0 * ctx["resid"]), None, None)


@differentiable("weighted_sse")
def weighted_sse(pred: Tensor, gt, weight) -> Tensor:
    """sum(weight * (pred - gt)**2); ``gt`` and ``weight`` are constants."""
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    weight = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if gt.shape != pred.shape or weight.shape != pred.shape:
        raise InvalidArgumentError(
            f"weighted_sse: shapes differ (pred {pred.shape}, gt {gt.shape}, weight {weight.shape})")
    resid = pred.data - gt
    out = Tensor(np.sum(weight * resid * resid).reshape(()), dtype=pred.dtype)
    return record("weighted_sse", (pred, Tensor(gt), Tensor(weight)), out, _weighted_sse_grad,
                  resid=resid, weight=weight.astype(pred.dtype))
