"""Tape-based reverse-mode autodiff over dense NCHW tensors.

Values are plain numpy arrays of shape (N, C, H, W). A forward pass records
one Node per op onto a Tape; gradients are computed either by a plain reverse
sweep (`backward_full`) or block-wise with recomputation
(`backward_checkpointed`), which retains only activations that cross block
boundaries and re-runs each block's forward before its backward. Both sweeps
visit nodes in the same descending-index order and accumulate contributions in
the same sequence, so in float64 they produce bit-identical gradients.

Determinism notes: convolution is im2col + one GEMM per call with a fixed
summation order, max-pool breaks ties in favour of the first element in
row-major window order, and all reductions use numpy's fixed evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


@dataclass
class Parameter:
    """Learnable tensor with gradient buffer and ADAM state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def size(self):
        return self.value.size


@dataclass
class BatchNormStats:
    """Running statistics of a batch-norm layer (not learnable)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels, dtype):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple
    params: tuple
    attrs: dict
    value: np.ndarray
    saved: tuple


def _held_elements(node):
    n = node.value.size if node.value is not None else 0
    if node.saved is not None:
        n += sum(s.size for s in node.saved if isinstance(s, np.ndarray))
    return n


class Tape:
    """Recorded computation graph. One tape per training step.

    `training` selects batch-norm behaviour; `cut_points` (appended via
    `cut()`) partition the node list into blocks for checkpointed backprop.
    """

    def __init__(self, training=True, check_finite=False):
        self.nodes = []
        self.cut_points = []
        self.training = training
        self.check_finite = check_finite
        self._replaying = False
        self.retained = 0
        self.peak_retained = 0

    # -- recording ---------------------------------------------------------

    def input(self, array):
        array = np.asarray(array)
        if array.ndim != 4:
            raise ShapeError(f"expected NCHW array, got shape {array.shape}")
        node = Node("input", (), (), {}, array, ())
        self.nodes.append(node)
        self._hold(node)
        return len(self.nodes) - 1

    def apply(self, op, inputs, params=(), **attrs):
        fwd = OPS[op][0]
        xs = [self.nodes[i].value for i in inputs]
        pvals = [p.value for p in params]
        out, saved = fwd(attrs, pvals, xs, self.training, self._replaying)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        node = Node(op, tuple(inputs), tuple(params), attrs, out, saved)
        self.nodes.append(node)
        self._hold(node)
        return len(self.nodes) - 1

    def cut(self):
        """Place a block boundary after the last recorded node."""
        idx = len(self.nodes)
        if idx and (not self.cut_points or self.cut_points[-1] != idx):
            self.cut_points.append(idx)

    # -- op conveniences ----------------------------------------------------

    def conv2d(self, x, weight, bias=None, stride=1, pad=None):
        if pad is None:
            pad = weight.value.shape[2] // 2
        params = (weight,) if bias is None else (weight, bias)
        return self.apply("conv2d", (x,), params, stride=stride, pad=pad,
                          has_bias=bias is not None)

    def batch_norm(self, x, gamma, beta, stats, eps=1e-5, momentum=0.9):
        return self.apply("batch_norm", (x,), (gamma, beta), stats=stats,
                          eps=eps, momentum=momentum)

    def relu(self, x):
        return self.apply("relu", (x,))

    def max_pool(self, x, factor):
        return self.apply("max_pool", (x,), factor=factor)

    def unpool_repeat(self, x, factor):
        return self.apply("unpool_repeat", (x,), factor=factor)

    def upsample_bilinear(self, x, factor):
        return self.apply("upsample_bilinear", (x,), factor=factor)

    def concat_channels(self, a, b):
        return self.apply("concat_channels", (a, b))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def scale(self, x, s):
        return self.apply("scale", (x,), s=float(s))

    def mul_const(self, x, c):
        return self.apply("mul_const", (x,), c=np.asarray(c))

    def softmax_channels(self, x):
        return self.apply("softmax_channels", (x,))

    def sum(self, x):
        return self.apply("sum", (x,))

    def value(self, i):
        return self.nodes[i].value

    # -- activation accounting ----------------------------------------------

    def _hold(self, node):
        self.retained += _held_elements(node)
        if self.retained > self.peak_retained:
            self.peak_retained = self.retained

    def _free(self, node):
        self.retained -= _held_elements(node)
        node.value = None
        node.saved = None


# ---------------------------------------------------------------------------
# op implementations: fwd(attrs, pvals, xs, training, replay) -> (out, saved)
#                     bwd(attrs, pvals, xs, out, saved, gy) -> (gxs, gparams)
# ---------------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """Patch matrix (N, C*kh*kw, OH*OW); a zero-copy reshape of the
    contiguous (N, C, kh, kw, OH, OW) fill buffer. 1x1/stride-1 kernels are
    a plain reshape of the input."""
    n, c, h, w = x.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return x.reshape(n, c, h * w), h, w
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + oh * stride:stride,
                                 j:j + ow * stride:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return gcols.reshape(n, c, h, w)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += g6[:, :, i, j]
    if pad:
        gx = np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + w])
    return gx


def _conv2d_fwd(attrs, pvals, xs, training, replay):
    (x,) = xs
    w = pvals[0]
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    stride, pad = attrs["stride"], attrs["pad"]
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(cout, -1), cols)
    if attrs["has_bias"]:
        out += pvals[1][None, :, None]
    return out.reshape(x.shape[0], cout, oh, ow), ()


def _conv2d_bwd(attrs, pvals, xs, out, saved, gy):
    (x,) = xs
    w = pvals[0]
    cout, cin, kh, kw = w.shape
    stride, pad = attrs["stride"], attrs["pad"]
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    g = np.ascontiguousarray(gy).reshape(x.shape[0], cout, oh * ow)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w.reshape(cout, -1).T, g)
    gx = _col2im(gcols, x.shape, kh, kw, stride, pad)
    gparams = [gw, g.sum(axis=(0, 2))] if attrs["has_bias"] else [gw]
    return [gx], gparams


def _bn_fwd(attrs, pvals, xs, training, replay):
    (x,) = xs
    gamma, beta = pvals
    stats, eps = attrs["stats"], attrs["eps"]
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(
            f"batch_norm: input has {x.shape[1]} channels, gamma has {gamma.shape[0]}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        if not replay:
            mom = attrs["momentum"]
            stats.mean = mom * stats.mean + (1.0 - mom) * mean
            stats.var = mom * stats.var + (1.0 - mom) * var
    else:
        mean = stats.mean.astype(x.dtype, copy=False)
        inv = 1.0 / np.sqrt(stats.var.astype(x.dtype, copy=False) + eps)
    # out = gamma * (x - mean) * inv + beta, folded to one multiply-add
    scale = gamma * inv
    shift = beta - mean * scale
    out = x * scale[None, :, None, None] + shift[None, :, None, None]
    return out, (mean, inv, training)


def _bn_bwd(attrs, pvals, xs, out, saved, gy):
    (x,) = xs
    gamma, _ = pvals
    mean, inv, was_training = saved
    xc = x - mean[None, :, None, None]
    s1 = gy.sum(axis=(0, 2, 3))
    s2 = (gy * xc).sum(axis=(0, 2, 3))
    ggamma = s2 * inv
    if was_training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        # gx = gamma*inv * (gy - mean(gy) - xhat * mean(gy*xhat)) per channel
        k = inv * inv * s2 / m
        gx = (gy - s1[None, :, None, None] / m - xc * k[None, :, None, None]) \
            * (gamma * inv)[None, :, None, None]
    else:
        gx = gy * (gamma * inv)[None, :, None, None]
    return [gx], [ggamma, s1]


def _relu_fwd(attrs, pvals, xs, training, replay):
    return np.maximum(xs[0], 0), ()


def _relu_bwd(attrs, pvals, xs, out, saved, gy):
    return [gy * (out > 0)], []


def _max_pool_fwd(attrs, pvals, xs, training, replay):
    (x,) = xs
    f = attrs["factor"]
    n, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"max_pool: spatial dims {h}x{w} not divisible by {f}")
    xr = x.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, h // f, w // f, f * f)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, (idx.astype(np.int32),)


def _max_pool_bwd(attrs, pvals, xs, out, saved, gy):
    f = attrs["factor"]
    (idx,) = saved
    n, c, oh, ow = gy.shape
    g = np.zeros((n, c, oh, ow, f * f), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.int64), gy[..., None], axis=-1)
    gx = g.reshape(n, c, oh, ow, f, f).transpose(0, 1, 2, 4, 3, 5)
    return [gx.reshape(n, c, oh * f, ow * f)], []


def _unpool_fwd(attrs, pvals, xs, training, replay):
    f = attrs["factor"]
    x = xs[0]
    if f == 1:
        return x.copy(), ()
    return x.repeat(f, axis=2).repeat(f, axis=3), ()


def _unpool_bwd(attrs, pvals, xs, out, saved, gy):
    f = attrs["factor"]
    if f == 1:
        return [gy], []
    n, c, h, w = gy.shape
    return [gy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))], []


def _bilinear_grid(out_len, factor, dtype):
    src = (np.arange(out_len, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.floor(src)
    frac = (src - i0).astype(dtype)
    i0 = np.clip(i0, 0, (out_len // factor) - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, (out_len // factor) - 1)
    # src < 0 clamps both taps to the first cell: weight becomes irrelevant
    frac[src < 0] = 0.0
    return i0, i1, frac


def _scatter_add_axis3(dst, idx, src):
    # np.add.at needs the indexed axis in front
    dt = dst.transpose(3, 0, 1, 2)
    np.add.at(dt, idx, src.transpose(3, 0, 1, 2))


def _bilinear_fwd(attrs, pvals, xs, training, replay):
    f = attrs["factor"]
    x = xs[0]
    if f == 1:
        return x.copy(), ()
    n, c, h, w = x.shape
    i0, i1, wi = _bilinear_grid(h * f, f, x.dtype)
    j0, j1, wj = _bilinear_grid(w * f, f, x.dtype)
    t = x[:, :, i0, :] * (1 - wi)[None, None, :, None] \
        + x[:, :, i1, :] * wi[None, None, :, None]
    out = t[:, :, :, j0] * (1 - wj)[None, None, None, :] \
        + t[:, :, :, j1] * wj[None, None, None, :]
    return out, (i0, i1, wi, j0, j1, wj)


def _bilinear_bwd(attrs, pvals, xs, out, saved, gy):
    f = attrs["factor"]
    if f == 1:
        return [gy], []
    x = xs[0]
    n, c, h, w = x.shape
    i0, i1, wi, j0, j1, wj = saved
    gt = np.zeros((n, c, h * f, w), dtype=gy.dtype)
    _scatter_add_axis3(gt, j0, gy * (1 - wj)[None, None, None, :])
    _scatter_add_axis3(gt, j1, gy * wj[None, None, None, :])
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    gtt = gx.transpose(2, 0, 1, 3)
    np.add.at(gtt, i0, (gt * (1 - wi)[None, None, :, None]).transpose(2, 0, 1, 3))
    np.add.at(gtt, i1, (gt * wi[None, None, :, None]).transpose(2, 0, 1, 3))
    return [gx], []


def _concat_fwd(attrs, pvals, xs, training, replay):
    a, b = xs
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), ()


def _concat_bwd(attrs, pvals, xs, out, saved, gy):
    ca = xs[0].shape[1]
    return [np.ascontiguousarray(gy[:, :ca]), np.ascontiguousarray(gy[:, ca:])], []


def _add_fwd(attrs, pvals, xs, training, replay):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b, ()


def _add_bwd(attrs, pvals, xs, out, saved, gy):
    return [gy, gy], []


def _scale_fwd(attrs, pvals, xs, training, replay):
    return xs[0] * xs[0].dtype.type(attrs["s"]), ()


def _scale_bwd(attrs, pvals, xs, out, saved, gy):
    return [gy * gy.dtype.type(attrs["s"])], []


def _mul_const_fwd(attrs, pvals, xs, training, replay):
    return xs[0] * attrs["c"], ()


def _mul_const_bwd(attrs, pvals, xs, out, saved, gy):
    return [gy * attrs["c"]], []


def _softmax_fwd(attrs, pvals, xs, training, replay):
    x = xs[0]
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), ()


def _softmax_bwd(attrs, pvals, xs, out, saved, gy):
    return [out * (gy - (gy * out).sum(axis=1, keepdims=True))], []


def _sum_fwd(attrs, pvals, xs, training, replay):
    return xs[0].sum().reshape(1, 1, 1, 1), ()


def _sum_bwd(attrs, pvals, xs, out, saved, gy):
    return [np.full(xs[0].shape, gy.flat[0], dtype=gy.dtype)], []


OPS = {
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "batch_norm": (_bn_fwd, _bn_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "max_pool": (_max_pool_fwd, _max_pool_bwd),
    "unpool_repeat": (_unpool_fwd, _unpool_bwd),
    "upsample_bilinear": (_bilinear_fwd, _bilinear_bwd),
    "concat_channels": (_concat_fwd, _concat_bwd),
    "add": (_add_fwd, _add_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "mul_const": (_mul_const_fwd, _mul_const_bwd),
    "softmax_channels": (_softmax_fwd, _softmax_bwd),
    "sum": (_sum_fwd, _sum_bwd),
}


def register_op(name, forward, backward):
    """Extend the op set (used by the loss module)."""
    OPS[name] = (forward, backward)


# ---------------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------------


@dataclass
class BackwardResult:
    input_grads: dict
    peak_retained: int
    blocks: int = 1


def _backprop_range(tape, lo, hi, grads, input_grads):
    """Reverse sweep over nodes [lo, hi); identical accumulation order for
    full and checkpointed backprop."""
    for i in reversed(range(lo, hi)):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.op == "input":
            input_grads[i] = g
            continue
        xs = [tape.nodes[j].value for j in node.inputs]
        bwd = OPS[node.op][1]
        gxs, gparams = bwd(node.attrs, [p.value for p in node.params],
                           xs, node.value, node.saved, g)
        for j, gx in zip(node.inputs, gxs):
            if gx is None:
                continue
            grads[j] = grads[j] + gx if j in grads else gx
        for p, gp in zip(node.params, gparams):
            if gp is not None:
                p.grad += gp


def _seed_grads(tape, loss_node):
    node = tape.nodes[loss_node]
    if node.value.size != 1:
        raise ValueError(
            f"loss node must be scalar, got shape {node.value.shape}")
    return {loss_node: np.ones((1, 1, 1, 1), dtype=node.value.dtype)}


def backward_full(tape, loss_node):
    """Plain reverse-mode sweep; every recorded activation stays resident."""
    grads = _seed_grads(tape, loss_node)
    peak = tape.retained
    input_grads = {}
    _backprop_range(tape, 0, loss_node + 1, grads, input_grads)
    return BackwardResult(input_grads, peak, blocks=1)


def backward_checkpointed(tape, loss_node):
    """Block-partitioned backprop: free non-boundary activations, then for
    each block (deepest first) recompute its forward and run its backward.

    Gradients are bit-identical to `backward_full` in float64 because node
    visit order and accumulation order are unchanged and recomputed forwards
    are deterministic. Batch-norm running statistics are not updated again
    during replay.
    """
    n = loss_node + 1
    grads = _seed_grads(tape, loss_node)
    if any(c <= 0 or c > len(tape.nodes) for c in tape.cut_points):
        raise ValueError(f"cut_points out of bounds: {tape.cut_points}")
    for a, b in zip(tape.cut_points, tape.cut_points[1:]):
        if b <= a:
            raise ValueError("cut_points must be strictly increasing")
    cuts = [c for c in tape.cut_points if c < n]
    bounds = [0] + cuts + [n]
    nblocks = len(bounds) - 1

    def block_of(i):
        for b in range(nblocks):
            if i < bounds[b + 1]:
                return b
        return nblocks - 1

    keep = set()
    for i in range(n):
        bi = block_of(i)
        for j in tape.nodes[i].inputs:
            if block_of(j) < bi:
                keep.add(j)

    for i in range(n):
        node = tape.nodes[i]
        if node.op == "input":
            continue
        if i in keep:
            # value stays; backward context is recomputed with its block
            tape.retained -= sum(s.size for s in node.saved
                                 if isinstance(s, np.ndarray))
            node.saved = None
        else:
            tape._free(node)
    tape.peak_retained = tape.retained

    input_grads = {}
    for b in reversed(range(nblocks)):
        lo, hi = bounds[b], bounds[b + 1]
        replay_prev = tape._replaying
        tape._replaying = True
        try:
            for i in range(lo, hi):
                node = tape.nodes[i]
                if node.op == "input":
                    continue
                xs = [tape.nodes[j].value for j in node.inputs]
                fwd = OPS[node.op][0]
                out, saved = fwd(node.attrs, [p.value for p in node.params],
                                 xs, tape.training, True)
                if node.value is None:
                    node.value, node.saved = out, saved
                    tape._hold(node)
                else:
                    node.saved = saved
                    tape._hold(Node("", (), (), {}, None, saved))
        finally:
            tape._replaying = replay_prev
        _backprop_range(tape, lo, hi, grads, input_grads)
        for i in range(lo, hi):
            if tape.nodes[i].op != "input":
                tape._free(tape.nodes[i])
    return BackwardResult(input_grads, tape.peak_retained, blocks=nblocks)


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update; reads and clears nothing, callers zero
    grads themselves."""
    for p in params:
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)


def zero_grads(params):
    for p in params:
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. array x (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        g.reshape(-1)[k] = (fp - fm) / (2.0 * h)
    return g


def grad_rel_error(analytic, numeric):
    """max_i |a-n| / max(|a|+|n|, 1e-3)."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom))
