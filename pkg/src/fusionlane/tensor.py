"""Reverse-mode autodiff on float32 numpy arrays.

Implements exactly the operation set the segmentation network needs:
strided/dilated 2-D convolution, depthwise separable convolution, batch
normalization, elementwise activations, align-corners bilinear upsampling,
channel concatenation, global average pooling, and weighted cross entropy.
Each op attaches a backward closure to its output tensor; `backward` walks
the graph once in reverse topological order, accumulates gradients by
summation, and frees the graph.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "RunningStats",
    "conv2d",
    "depthwise_separable_conv",
    "batch_norm",
    "activation",
    "relu",
    "sigmoid",
    "tanh",
    "bilinear_upsample",
    "global_average_pool",
    "concat_channels",
    "weighted_cross_entropy",
    "backward",
]


class ShapeError(ValueError):
    """Input shapes are inconsistent for the requested operation."""


_grad_enabled = True
_dtype = np.float32


class no_grad:
    """Disables graph construction inside a ``with`` block (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class precision:
    """Temporarily switch the engine's working dtype.

    Training and inference run in float32; finite-difference gradient checks
    need float64, where the step can shrink below the kink/roundoff floor of
    a deep ReLU network. Tensors created inside the block carry the dtype.
    """

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype).type

    def __enter__(self):
        global _dtype
        self._prev = _dtype
        _dtype = self._dtype
        return self

    def __exit__(self, *exc):
        global _dtype
        _dtype = self._prev
        return False


class Tensor:
    """Dense float32 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(dtype=self.data.dtype))
        if _needs_grad(self):
            def _bw():
                _acc(self, np.full_like(self.data, float(out.grad)))
            _attach(out, (self,), _bw)
        return out

    def backward(self):
        backward(self)

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _scale(self, -1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _attach(out: Tensor, parents, bw) -> None:
    out.requires_grad = True
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = bw


def _acc(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if _needs_grad(a, b):
        def _bw():
            g = out.grad
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(g, b.data.shape))
        _attach(out, (a, b), _bw)
    return out


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if _needs_grad(a, b):
        def _bw():
            g = out.grad
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
            _acc(b, _unbroadcast(g * a.data, b.data.shape))
        _attach(out, (a, b), _bw)
    return out


def _scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * k)
    if _needs_grad(a):
        def _bw():
            _acc(a, out.grad * k)
        _attach(out, (a,), _bw)
    return out


# ---------------------------------------------------------------------------
# convolution


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _same_geometry(h, w, kh, kw, stride, dilation):
    """Output size and zero-padding for ceil(input/stride) 'same' convolution."""
    oh, ow = _ceil_div(h, stride), _ceil_div(w, stride)
    ph = max((oh - 1) * stride + (kh - 1) * dilation + 1 - h, 0)
    pw = max((ow - 1) * stride + (kw - 1) * dilation + 1 - w, 0)
    return oh, ow, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, oh * ow), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            r0, c0 = ki * dilation, kj * dilation
            patch = xp[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
                       c0:c0 + (ow - 1) * stride + 1:stride]
            cols[:, :, ki * kw + kj, :] = patch.reshape(n, c, oh * ow)
    return cols


def _col2im(gcols, shape, kh, kw, stride, dilation, oh, ow):
    # For a fixed kernel tap the output->input index map is injective, so each
    # tap can be scattered with one strided-slice add.
    n, c = shape[:2]
    gxp = np.zeros(shape, dtype=gcols.dtype)
    g5 = gcols.reshape(n, c, kh * kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            r0, c0 = ki * dilation, kj * dilation
            gxp[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
                c0:c0 + (ow - 1) * stride + 1:stride] += g5[:, :, ki * kw + kj]
    return gxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """'Same'-padded 2-D convolution; output spatial dims are ceil(input/stride).

    ``x`` is NCHW, ``kernel`` is (out, in/groups, kh, kw).
    """
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got shape {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    o, ci_g, kh, kw = kernel.data.shape
    if ci_g * groups != cin:
        raise ShapeError(
            f"kernel expects {ci_g * groups} input channels (dim 1 = {ci_g}, groups = {groups}), "
            f"input has {cin}")
    if o % groups:
        raise ShapeError(f"output channels {o} not divisible by groups {groups}")

    oh, ow, (pt, pb), (pl, pr) = _same_geometry(h, w, kh, kw, stride, dilation)
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)  # (n, cin, K, L)
    kk = kh * kw

    if groups == 1:
        y = np.matmul(kernel.data.reshape(o, cin * kk), cols.reshape(n, cin * kk, oh * ow))
    elif groups == cin and o == cin and ci_g == 1:
        y = np.einsum("ck,nckl->ncl", kernel.data.reshape(o, kk), cols)
    else:
        cols_g = cols.reshape(n, groups, (cin // groups) * kk, oh * ow)
        w_g = kernel.data.reshape(groups, o // groups, ci_g * kk)
        parts = [np.matmul(w_g[g], cols_g[:, g]) for g in range(groups)]
        y = np.concatenate(parts, axis=1)
    y = np.ascontiguousarray(y.reshape(n, o, oh, ow))

    out = Tensor(y)
    if _needs_grad(x, kernel):
        def _bw():
            g = out.grad.reshape(n, o, oh * ow)
            if groups == 1:
                if kernel.requires_grad:
                    gw = np.tensordot(g, cols.reshape(n, cin * kk, oh * ow),
                                      axes=([0, 2], [0, 2]))
                    _acc(kernel, gw.reshape(kernel.data.shape))
                if x.requires_grad:
                    gcols = np.matmul(kernel.data.reshape(o, cin * kk).T, g)
                    gxp = _col2im(gcols, xp.shape, kh, kw, stride, dilation, oh, ow)
                    _acc(x, gxp[:, :, pt:pt + h, pl:pl + w])
            elif groups == cin and o == cin and ci_g == 1:
                if kernel.requires_grad:
                    gw = np.einsum("ncl,nckl->ck", g, cols)
                    _acc(kernel, gw.reshape(kernel.data.shape))
                if x.requires_grad:
                    gcols = g[:, :, None, :] * kernel.data.reshape(1, o, kk, 1)
                    gxp = _col2im(gcols, xp.shape, kh, kw, stride, dilation, oh, ow)
                    _acc(x, gxp[:, :, pt:pt + h, pl:pl + w])
            else:
                cols_g = cols.reshape(n, groups, (cin // groups) * kk, oh * ow)
                g_g = g.reshape(n, groups, o // groups, oh * ow)
                if kernel.requires_grad:
                    gw = np.stack([
                        np.tensordot(g_g[:, gi], cols_g[:, gi], axes=([0, 2], [0, 2]))
                        for gi in range(groups)])
                    _acc(kernel, gw.reshape(kernel.data.shape))
                if x.requires_grad:
                    w_g = kernel.data.reshape(groups, o // groups, ci_g * kk)
                    gcols = np.stack([np.matmul(w_g[gi].T, g_g[:, gi])
                                      for gi in range(groups)], axis=1)
                    gxp = _col2im(gcols.reshape(n, cin, kk, oh * ow), xp.shape,
                                  kh, kw, stride, dilation, oh, ow)
                    _acc(x, gxp[:, :, pt:pt + h, pl:pl + w])
        _attach(out, (x, kernel), _bw)
    return out


def depthwise_separable_conv(x: Tensor, depth_kernel: Tensor, point_kernel: Tensor,
                             stride: int = 1) -> Tensor:
    """Per-channel spatial convolution followed by a 1x1 channel-mixing convolution."""
    cin = x.data.shape[1]
    dk = depth_kernel.data.shape
    if dk[0] != cin or dk[1] != 1:
        raise ShapeError(
            f"depth kernel must have one filter per input channel, expected "
            f"({cin}, 1, kh, kw), got {dk}")
    pk = point_kernel.data.shape
    if pk[2] != 1 or pk[3] != 1:
        raise ShapeError(f"point kernel must be 1x1 spatially, got {pk}")
    if pk[1] != cin:
        raise ShapeError(f"point kernel expects {pk[1]} input channels, input has {cin}")
    dw = conv2d(x, depth_kernel, stride=stride, groups=cin)
    return conv2d(dw, point_kernel)


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean/variance, updated in train mode, read in infer mode."""

    __slots__ = ("mean", "var", "momentum")

    def __init__(self, channels: int, momentum: float = 0.9):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, mode: str,
               stats: RunningStats, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W) with affine transform."""
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if n == 0:
        raise ValueError("batch_norm received a batch of size 0")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"scale/shift must have shape ({c},), got {scale.data.shape} and {shift.data.shape}")

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean = (m * stats.mean + (1.0 - m) * mean).astype(np.float32)
        stats.var = (m * stats.var + (1.0 - m) * var).astype(np.float32)
    else:
        mean, var = stats.mean, stats.var

    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = scale.data.reshape(1, c, 1, 1) * xhat + shift.data.reshape(1, c, 1, 1)

    out = Tensor(y)
    if _needs_grad(x, scale, shift):
        def _bw():
            g = out.grad
            if scale.requires_grad:
                _acc(scale, (g * xhat).sum(axis=(0, 2, 3)))
            if shift.requires_grad:
                _acc(shift, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gy = g * scale.data.reshape(1, c, 1, 1)
                if mode == "infer":
                    _acc(x, gy * inv.reshape(1, c, 1, 1))
                else:
                    count = n * h * w
                    s1 = gy.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    gx = inv.reshape(1, c, 1, 1) * (gy - s1 / count - xhat * (s2 / count))
                    _acc(x, gx)
        _attach(out, (x, scale, shift), _bw)
    return out


# ---------------------------------------------------------------------------
# elementwise activations


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        y = np.maximum(x.data, 0.0)
    elif kind == "sigmoid":
        y = _stable_sigmoid(x.data)
    elif kind == "tanh":
        y = np.tanh(x.data)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    out = Tensor(y)
    if _needs_grad(x):
        def _bw():
            g = out.grad
            if kind == "relu":
                _acc(x, g * (x.data > 0))
            elif kind == "sigmoid":
                _acc(x, g * y * (1.0 - y))
            else:
                _acc(x, g * (1.0 - y * y))
        _attach(out, (x,), _bw)
    return out


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------------------
# resampling / pooling / concat


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic align-corners interpolation matrix, float64."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    step = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for o in range(n_out):
        s = o * step
        i0 = min(int(math.floor(s)), n_in - 2)
        f = s - i0
        m[o, i0] = 1.0 - f
        m[o, i0 + 1] = f
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upsampling: corner pixels map to corner pixels."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be 4-D NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ValueError(
            f"bilinear_upsample cannot downsize: input {h}x{w}, requested {out_h}x{out_w}")
    wr = _interp_matrix(h, out_h)
    wc = _interp_matrix(w, out_w)
    # float64 internally so constant inputs stay exactly constant after the cast
    y = wr @ x.data.astype(np.float64) @ wc.T
    out = Tensor(y)
    if _needs_grad(x):
        def _bw():
            gx = wr.T @ out.grad.astype(np.float64) @ wc
            _acc(x, gx.astype(x.data.dtype))
        _attach(out, (x,), _bw)
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, output shape N x C x 1 x 1."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_average_pool input must be 4-D NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    y = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    out = Tensor(y)
    if _needs_grad(x):
        def _bw():
            _acc(x, np.broadcast_to(out.grad / (h * w), x.data.shape).astype(x.data.dtype))
        _attach(out, (x,), _bw)
    return out


def concat_channels(parts) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].data.shape
    for i, p in enumerate(parts):
        s = p.data.shape
        if len(s) != 4 or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels part {i} has shape {s}, incompatible with {ref} "
                f"(batch and spatial dims must match)")
    y = np.concatenate([p.data for p in parts], axis=1)
    out = Tensor(y)
    if _needs_grad(*parts):
        offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
        def _bw():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _acc(p, g[:, lo:hi])
        _attach(out, parts, _bw)
    return out


# ---------------------------------------------------------------------------
# loss


def weighted_cross_entropy(logits: Tensor, target, class_weights) -> Tensor:
    """Mean over pixels of w[target] * (-log softmax(logits)[target]).

    ``logits`` is N x K x H x W; ``target`` an integer N x H x W label map.
    The reduction runs in float64 so the scalar is accurate to well below
    the float32 storage resolution.
    """
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be 4-D NKHW, got shape {logits.data.shape}")
    n, k, h, w = logits.data.shape
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise ShapeError(f"target shape {t.shape} does not match logits ({n}, {h}, {w})")
    if not np.issubdtype(t.dtype, np.integer):
        t = t.astype(np.int64)
    if t.min(initial=0) < 0 or t.max(initial=0) >= k:
        bad = int(t.max()) if t.max(initial=0) >= k else int(t.min())
        raise ValueError(f"target value {bad} outside [0, {k})")
    wts = np.asarray(class_weights, dtype=np.float64)
    if wts.shape != (k,):
        raise ShapeError(f"class_weights must have length {k}, got shape {wts.shape}")
    if (wts <= 0).any():
        raise ValueError("class weights must be positive")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t4 = t[:, None]
    picked = np.take_along_axis(logp, t4, axis=1)[:, 0]
    pw = wts[t]
    loss = -(pw * picked).mean()

    out = Tensor(loss)
    if _needs_grad(logits):
        def _bw():
            count = t.size
            gl = np.exp(logp) * pw[:, None] / count
            at_t = np.take_along_axis(gl, t4, axis=1) - (pw / count)[:, None]
            np.put_along_axis(gl, t4, at_t, axis=1)
            _acc(logits, (float(out.grad) * gl).astype(logits.data.dtype))
        _attach(out, (logits,), _bw)
    return out


# ---------------------------------------------------------------------------
# graph walk


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every reachable requires_grad tensor, then free the graph.

    Gradients accumulate by summation across calls; `optimizer_step` clears them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
    for node in topo:
        node._parents = ()
        node._backward = None
