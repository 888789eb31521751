"""Differentiable primitive operations.

Every op kind has a forward rule and an exact analytic backward rule.
Image tensors are laid out (batch, channel, height, width), row-major.
Convolution kinds use the shape rule ``out = (H + 2p - k) // s + 1``; with
kernel 4, stride 2, padding 1 this halves even spatial extents exactly, and
the transposed convolution with the same hyperparameters doubles them
(``out = (H - 1) * s - 2p + k``, output padding fixed at 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import NumericError, ShapeError

# Variance guard for the normalization kinds; running-statistics momentum.
NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1
# Leaky-ReLU negative slope (PatchGAN lineage default).
LEAKY_SLOPE = 0.2

OP_KINDS = (
    "dense",
    "conv2d",
    "deconv2d",
    "batch_norm",
    "instance_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softmax",
    "avg_pool",
    "reshape",
    "add",
    "affine_rescale",
)


@dataclass(frozen=True)
class OpSpec:
    """One primitive operation plus its hyperparameters.

    Unused hyperparameters keep their defaults; e.g. a ``relu`` spec ignores
    everything but ``kind``.
    """

    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    slope: float = LEAKY_SLOPE
    eps: float = NORM_EPS
    momentum: float = NORM_MOMENTUM
    shape: tuple = ()          # reshape target, per sample (batch axis implied)
    scale: float = 1.0         # affine_rescale: y = scale * x + shift
    shift: float = 0.0
    global_pool: bool = False  # avg_pool over the full spatial extent

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ShapeError(f"unknown op kind {self.kind!r}")


class Ctx:
    """Per-forward execution context shared by all nodes of a graph run."""

    __slots__ = ("mode", "update_stats")

    def __init__(self, mode: str = "eval", update_stats: bool = False):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.update_stats = update_stats


def conv_out_size(h: int, k: int, s: int, p: int) -> int:
    out = (h + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"spatial extent {h} too small for kernel {k} stride {s} pad {p}")
    return out


def deconv_out_size(h: int, k: int, s: int, p: int) -> int:
    return (h - 1) * s - 2 * p + k


# ---------------------------------------------------------------------------
# im2col / col2im kernels shared by conv2d and deconv2d
# ---------------------------------------------------------------------------

def _im2col(x, k, s, p):
    """Unfold (B,C,H,W) into (B*Ho*Wo, C*k*k) patch rows."""
    b, c, h, w = x.shape
    ho = conv_out_size(h, k, s, p)
    wo = conv_out_size(w, k, s, p)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    sb, sc, sh, sw = x.strides
    win = as_strided(x, (b, c, k, k, ho, wo), (sb, sc, sh, sw, sh * s, sw * s))
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(b * ho * wo, c * k * k), ho, wo


def _col2im(dcols_kkc, b, c, h, w, k, s, p, ho, wo):
    """Scatter-add patch rows back onto a (B,C,H,W) canvas.

    ``dcols_kkc`` is (B*Ho*Wo, k*k*C) with columns ordered (kh, kw, c), so the
    inner slab additions run over contiguous channel blocks; the producer
    permutes the weight matrix accordingly.
    """
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dcols_kkc.dtype)
    d = dcols_kkc.reshape(b, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i:i + s * ho:s, j:j + s * wo:s, :] += d[:, :, :, i, j, :]
    if p:
        out = out[:, p:p + h, p:p + w, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Forward / backward rules. Each forward returns (y, cache); each backward
# takes (op, cache, gy) and returns (input_grads, param_grads).
# ---------------------------------------------------------------------------

class ScratchPool:
    """Reusable buffers for transient backward GEMM outputs.

    Safe only where the result is consumed before the next request of the
    same shape, which holds for the per-node accumulate-then-discard pattern
    in graph backward passes.
    """

    def __init__(self):
        self._bufs = {}

    def take(self, shape, dtype):
        key = (shape, np.dtype(dtype).str)
        buf = self._bufs.get(key)
        if buf is None:
            buf = np.empty(shape, dtype=dtype)
            self._bufs[key] = buf
        return buf


def _pooled_matmul(a, b, pool, shape):
    if pool is None:
        return a @ b
    out = pool.take(shape, a.dtype)
    np.matmul(a, b, out=out)
    return out


def _dense_fwd(op, xs, params, ctx):
    (x,) = xs
    w = params[0]  # (out, in); computed transposed, which is faster for small batches
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects (B,{w.shape[1]}), got {x.shape}")
    y = np.ascontiguousarray((w @ x.T).T)
    if len(params) > 1:
        y += params[1]
    return y, (x, w)


def _dense_bwd(op, cache, gy, want_params, pool=None):
    x, w = cache
    dx = np.ascontiguousarray((w.T @ gy.T).T)
    if not want_params:
        return (dx,), ()
    dw = _pooled_matmul(gy.T, x, pool, (w.shape[0], w.shape[1]))
    db = gy.sum(axis=0)
    return (dx,), (dw, db)


def _conv2d_fwd(op, xs, params, ctx):
    (x,) = xs
    w = params[0]
    co, ci, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != ci:
        raise ShapeError(f"conv2d expects (B,{ci},H,W), got {x.shape}")
    if k != op.kernel:
        raise ShapeError("conv2d weight kernel does not match op spec")
    b = x.shape[0]
    cols, ho, wo = _im2col(x, op.kernel, op.stride, op.padding)
    y = cols @ w.reshape(co, -1).T
    if len(params) > 1:
        y += params[1]
    y = np.ascontiguousarray(y.reshape(b, ho, wo, co).transpose(0, 3, 1, 2))
    return y, (cols, x.shape, w, ho, wo)


def _conv2d_bwd(op, cache, gy, want_params, pool=None):
    cols, xshape, w, ho, wo = cache
    b, ci, h, wd = xshape
    co, k = w.shape[0], op.kernel
    gmat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, co)
    w_kkc = w.transpose(0, 2, 3, 1).reshape(co, k * k * ci)  # copies; weights are small
    dcols = _pooled_matmul(gmat, w_kkc, pool, (gmat.shape[0], k * k * ci))
    dx = _col2im(dcols, b, ci, h, wd, k, op.stride, op.padding, ho, wo)
    if not want_params:
        return (dx,), ()
    dw = _pooled_matmul(gmat.T, cols, pool, (co, cols.shape[1])).reshape(w.shape)
    db = gmat.sum(axis=0)
    return (dx,), (dw, db)


def _deconv2d_fwd(op, xs, params, ctx):
    (x,) = xs
    w = params[0]
    ci, co, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != ci:
        raise ShapeError(f"deconv2d expects (B,{ci},H,W), got {x.shape}")
    b, _, h, wd = x.shape
    ho = deconv_out_size(h, k, op.stride, op.padding)
    wo = deconv_out_size(wd, k, op.stride, op.padding)
    xmat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, ci)
    w_kkc = w.transpose(0, 2, 3, 1).reshape(ci, k * k * co)
    dcols = xmat @ w_kkc
    # scatter with source grid (h, wd) playing the role of the conv output grid
    y = _col2im(dcols, b, co, ho, wo, k, op.stride, op.padding, h, wd)
    if len(params) > 1:
        y += params[1].reshape(1, co, 1, 1)
    return y, (xmat, x.shape, w, ho, wo)


def _deconv2d_bwd(op, cache, gy, want_params, pool=None):
    xmat, xshape, w, ho, wo = cache
    b, ci, h, wd = xshape
    co = w.shape[1]
    cols, oh, ow = _im2col(gy, op.kernel, op.stride, op.padding)
    if (oh, ow) != (h, wd):  # pragma: no cover - geometry guaranteed by forward
        raise ShapeError("deconv2d backward geometry mismatch")
    dx = _pooled_matmul(cols, w.reshape(ci, -1).T, pool, (cols.shape[0], ci))
    dx = np.ascontiguousarray(dx.reshape(b, h, wd, ci).transpose(0, 3, 1, 2))
    if not want_params:
        return (dx,), ()
    dw = _pooled_matmul(xmat.T, cols, pool, (ci, cols.shape[1])).reshape(w.shape)
    db = gy.sum(axis=(0, 2, 3))
    return (dx,), (dw, db)


def _norm_axes(x, kind):
    if kind == "batch_norm":
        if x.ndim == 4:
            return (0, 2, 3)
        if x.ndim == 2:
            return (0,)
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.ndim}-D")
    if x.ndim != 4:
        raise ShapeError("instance_norm expects 4-D input")
    return (2, 3)


def _affine_shape(x, kind):
    # broadcast shape for the per-channel gamma/beta
    if x.ndim == 2:
        return (1, x.shape[1])
    return (1, x.shape[1], 1, 1)


def _batch_norm_fwd(op, xs, params, ctx):
    (x,) = xs
    gamma, beta, rmean, rvar = params
    bshape = _affine_shape(x, "batch_norm")
    if ctx.mode == "train":
        axes = _norm_axes(x, "batch_norm")
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + op.eps)
        xhat = (x - mu) * invstd
        if ctx.update_stats:
            m = op.momentum
            rmean *= 1.0 - m
            rmean += m * mu.reshape(rmean.shape)
            rvar *= 1.0 - m
            rvar += m * var.reshape(rvar.shape)
        y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
        return y, ("train", xhat, invstd, gamma, bshape)
    invstd = (1.0 / np.sqrt(rvar + op.eps)).reshape(bshape)
    xhat = (x - rmean.reshape(bshape)) * invstd
    y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return y, ("eval", xhat, invstd, gamma, bshape)


def _norm_bwd_train(gy, xhat, invstd, gamma, bshape, axes):
    n = 1
    for a in axes:
        n *= gy.shape[a]
    t1 = gy.sum(axis=axes, keepdims=True)
    t2 = (gy * xhat).sum(axis=axes, keepdims=True)
    dx = gamma.reshape(bshape) * invstd / n * (n * gy - t1 - xhat * t2)
    return dx


def _batch_norm_bwd(op, cache, gy, want_params, pool=None):
    mode, xhat, invstd, gamma, bshape = cache
    if mode == "train":
        dx = _norm_bwd_train(gy, xhat, invstd, gamma, bshape, _norm_axes(gy, "batch_norm"))
    else:
        dx = gy * gamma.reshape(bshape) * invstd
    if not want_params:
        return (dx,), ()
    axes = _norm_axes(gy, "batch_norm")
    dgamma = (gy * xhat).sum(axis=axes)
    dbeta = gy.sum(axis=axes)
    # running statistics are buffers, not trainable: no gradient entries
    return (dx,), (dgamma, dbeta, None, None)


def _instance_norm_fwd(op, xs, params, ctx):
    (x,) = xs
    gamma, beta = params
    bshape = _affine_shape(x, "instance_norm")
    axes = _norm_axes(x, "instance_norm")
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + op.eps)
    xhat = (x - mu) * invstd
    y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return y, (xhat, invstd, gamma, bshape)


def _instance_norm_bwd(op, cache, gy, want_params, pool=None):
    xhat, invstd, gamma, bshape = cache
    dx = _norm_bwd_train(gy, xhat, invstd, gamma, bshape, (2, 3))
    if not want_params:
        return (dx,), ()
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    return (dx,), (dgamma, dbeta)


def _relu_fwd(op, xs, params, ctx):
    (x,) = xs
    y = np.maximum(x, 0)
    return y, (x > 0,)


def _relu_bwd(op, cache, gy, want_params, pool=None):
    (mask,) = cache
    return (gy * mask,), ()


def _leaky_relu_fwd(op, xs, params, ctx):
    (x,) = xs
    y = np.where(x > 0, x, op.slope * x)
    return y.astype(x.dtype, copy=False), (x > 0,)


def _leaky_relu_bwd(op, cache, gy, want_params, pool=None):
    (mask,) = cache
    dx = gy * np.where(mask, gy.dtype.type(1), gy.dtype.type(op.slope))
    return (dx,), ()


def _tanh_fwd(op, xs, params, ctx):
    y = np.tanh(xs[0])
    return y, (y,)


def _tanh_bwd(op, cache, gy, want_params, pool=None):
    (y,) = cache
    return (gy * (1.0 - y * y),), ()


def _sigmoid_fwd(op, xs, params, ctx):
    x = xs[0]
    # piecewise form avoids overflow in exp for large |x|
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, (y,)


def _sigmoid_bwd(op, cache, gy, want_params, pool=None):
    (y,) = cache
    return (gy * y * (1.0 - y),), ()


def _softmax_fwd(op, xs, params, ctx):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, (y,)


def _softmax_bwd(op, cache, gy, want_params, pool=None):
    (y,) = cache
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return (y * (gy - dot),), ()


def _avg_pool_fwd(op, xs, params, ctx):
    (x,) = xs
    if x.ndim != 4:
        raise ShapeError("avg_pool expects 4-D input")
    b, c, h, w = x.shape
    if op.global_pool:
        y = x.mean(axis=(2, 3), keepdims=True)
        return y, (x.shape,)
    k = op.kernel
    if op.stride != k or op.padding != 0:
        raise ShapeError("avg_pool supports kernel == stride with no padding, or global_pool")
    if h % k or w % k:
        raise ShapeError(f"avg_pool extent {h}x{w} not divisible by kernel {k}")
    y = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return y, (x.shape,)


def _avg_pool_bwd(op, cache, gy, want_params, pool=None):
    (xshape,) = cache
    b, c, h, w = xshape
    if op.global_pool:
        dx = np.broadcast_to(gy / (h * w), xshape).astype(gy.dtype, copy=True)
        return (dx,), ()
    k = op.kernel
    dx = np.broadcast_to(
        (gy / (k * k))[:, :, :, None, :, None], (b, c, h // k, k, w // k, k)
    ).reshape(xshape).astype(gy.dtype, copy=True)
    return (dx,), ()


def _reshape_fwd(op, xs, params, ctx):
    (x,) = xs
    y = x.reshape((x.shape[0],) + tuple(op.shape))
    return y, (x.shape,)


def _reshape_bwd(op, cache, gy, want_params, pool=None):
    (xshape,) = cache
    return (gy.reshape(xshape),), ()


def _add_fwd(op, xs, params, ctx):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} vs {b.shape}")
    return a + b, ()


def _add_bwd(op, cache, gy, want_params, pool=None):
    return (gy, gy), ()


def _affine_rescale_fwd(op, xs, params, ctx):
    return op.scale * xs[0] + op.shift, ()


def _affine_rescale_bwd(op, cache, gy, want_params, pool=None):
    dx = op.scale * gy
    return (dx.astype(gy.dtype, copy=False),), ()


@dataclass(frozen=True)
class _OpImpl:
    forward: callable
    backward: callable
    n_inputs: int
    param_names: tuple = ()          # suffixes used by the graph builders
    buffer_names: tuple = ()         # non-trainable entries (running stats)


_REGISTRY: dict[str, _OpImpl] = {
    "dense": _OpImpl(_dense_fwd, _dense_bwd, 1, ("weight", "bias")),
    "conv2d": _OpImpl(_conv2d_fwd, _conv2d_bwd, 1, ("weight", "bias")),
    "deconv2d": _OpImpl(_deconv2d_fwd, _deconv2d_bwd, 1, ("weight", "bias")),
    "batch_norm": _OpImpl(
        _batch_norm_fwd, _batch_norm_bwd, 1, ("gamma", "beta"), ("running_mean", "running_var")
    ),
    "instance_norm": _OpImpl(_instance_norm_fwd, _instance_norm_bwd, 1, ("gamma", "beta")),
    "relu": _OpImpl(_relu_fwd, _relu_bwd, 1),
    "leaky_relu": _OpImpl(_leaky_relu_fwd, _leaky_relu_bwd, 1),
    "tanh": _OpImpl(_tanh_fwd, _tanh_bwd, 1),
    "sigmoid": _OpImpl(_sigmoid_fwd, _sigmoid_bwd, 1),
    "softmax": _OpImpl(_softmax_fwd, _softmax_bwd, 1),
    "avg_pool": _OpImpl(_avg_pool_fwd, _avg_pool_bwd, 1),
    "reshape": _OpImpl(_reshape_fwd, _reshape_bwd, 1),
    "add": _OpImpl(_add_fwd, _add_bwd, 2),
    "affine_rescale": _OpImpl(_affine_rescale_fwd, _affine_rescale_bwd, 1),
}


def op_impl(kind: str) -> _OpImpl:
    return _REGISTRY[kind]


def forward_op(op: OpSpec, *inputs: np.ndarray, params=(), ctx: Ctx | None = None):
    """Run one primitive forward, with a finite-output check."""
    ctx = ctx or Ctx()
    y, _ = _REGISTRY[op.kind].forward(op, inputs, params, ctx)
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite output from {op.kind}")
    return y


def backward_op(op: OpSpec, *inputs: np.ndarray, upstream_grad, params=(), ctx: Ctx | None = None):
    """Forward then backward for one primitive; returns (input_grads, param_grads)."""
    ctx = ctx or Ctx()
    impl = _REGISTRY[op.kind]
    y, cache = impl.forward(op, inputs, params, ctx)
    if upstream_grad.shape != y.shape:
        raise ShapeError(f"upstream grad shape {upstream_grad.shape} != output {y.shape}")
    return impl.backward(op, cache, upstream_grad, True, None)
