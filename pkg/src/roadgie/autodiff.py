"""Minimal dense-tensor autodiff on numpy.

Supports exactly the operations the segmentation network and its training
loss need: elementwise arithmetic, activations, 2D convolution, pooling,
nearest upsampling, channel concatenation and directional 1D strip
convolution.  Every op records a backward closure on a tape; `backward()`
on a scalar walks the tape in reverse topological order.

Tensors default to float32; building a graph from float64 arrays runs the
whole graph in float64 (used by the finite-difference gradient checks).
"""

from __future__ import annotations

import numpy as np

# Directions for the strip convolution: vertical, horizontal, diagonal,
# anti-diagonal.
STRIP_DIRECTIONS = ((1, 0), (0, 1), (1, 1), (-1, 1))


class Tensor:
    """A dense n-d float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32):
        return Tensor(np.zeros(shape, dtype=dtype))

    @staticmethod
    def param(data, name=None):
        return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,))

        def bwd():
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)

        out._backward = bwd
        return out

    # -- autodiff core --------------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward()

    # -- elementwise ops ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _node(self.data + other.data, (self, other))

        def bwd():
            if self.requires_grad_path():
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad_path():
                other._accum(_unbroadcast(out.grad, other.data.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _node(self.data * other.data, (self, other))

        def bwd():
            if self.requires_grad_path():
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad_path():
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        out = _node(self.data / other.data, (self, other))

        def bwd():
            if self.requires_grad_path():
                self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
            if other.requires_grad_path():
                other._accum(
                    _unbroadcast(-out.grad * self.data / other.data**2, other.data.shape)
                )

        out._backward = bwd
        return out

    def __pow__(self, p):
        p = float(p)
        out = _node(self.data**p, (self,))
        out._backward = lambda: self._accum(out.grad * p * self.data ** (p - 1))
        return out

    def requires_grad_path(self):
        return self.requires_grad or bool(self._parents)

    def sum(self):
        out = _node(np.asarray(self.data.sum(), dtype=self.dtype), (self,))
        out._backward = lambda: self._accum(np.broadcast_to(out.grad, self.data.shape).copy())
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def log(self):
        out = _node(np.log(self.data), (self,))
        out._backward = lambda: self._accum(out.grad / self.data)
        return out

    def exp(self):
        out = _node(np.exp(self.data), (self,))
        out._backward = lambda: self._accum(out.grad * out.data)
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = _node(s.astype(self.dtype), (self,))
        out._backward = lambda: self._accum(out.grad * out.data * (1.0 - out.data))
        return out

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        out._backward = lambda: self._accum(out.grad * (self.data > 0))
        return out

    def clamp(self, lo, hi):
        out = _node(np.clip(self.data, lo, hi), (self,))
        mask = (self.data > lo) & (self.data < hi)
        out._backward = lambda: self._accum(out.grad * mask)
        return out

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,))
        out._backward = lambda: self._accum(out.grad.reshape(self.data.shape))
        return out

    def transpose(self, axes):
        inv = np.argsort(axes)
        out = _node(self.data.transpose(axes), (self,))
        out._backward = lambda: self._accum(out.grad.transpose(inv))
        return out


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents):
    t = Tensor(data)
    t._parents = tuple(parents)
    return t


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- structural ops -----------------------------------------------------------


def concat(tensors, axis=1):
    """Concatenate along `axis` (channel concat in NCHW by default)."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _node(data, tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * data.ndim
            sl[axis] = slice(a, b)
            t._accum(out.grad[tuple(sl)])

    out._backward = bwd
    return out


# -- convolution --------------------------------------------------------------


def conv2d_nhwc(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of x[N,H,W,C] with kernel[O,C,kh,kw].

    Channel-last layout keeps the inner gemm contiguous, which is what makes
    CPU inference fit the latency budget.  kh and kw must be odd.
    """
    N, H, W, C = x.data.shape
    O, Ck, kh, kw = kernel.data.shape
    if Ck != C:
        raise ValueError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: non-positive output size {Ho}x{Wo}")

    dtype = x.dtype
    xm = x.data.reshape(N * H * W, C)

    def spans(u, v):
        """Output/input slice pair for tap (u, v): y[io,jo] += t[io*s+u-pad, ...]."""
        io0 = max(0, -(-(pad - u) // stride))
        io1 = min(Ho - 1, (H - 1 - u + pad) // stride)
        jo0 = max(0, -(-(pad - v) // stride))
        jo1 = min(Wo - 1, (W - 1 - v + pad) // stride)
        if io1 < io0 or jo1 < jo0:
            return None
        osl = (slice(io0, io1 + 1), slice(jo0, jo1 + 1))
        isl = (
            slice(io0 * stride + u - pad, io1 * stride + u - pad + 1, stride),
            slice(jo0 * stride + v - pad, jo1 * stride + v - pad + 1, stride),
        )
        return osl, isl

    y = np.zeros((N, Ho, Wo, O), dtype=dtype)
    for u in range(kh):
        for v in range(kw):
            sp = spans(u, v)
            if sp is None:
                continue
            osl, isl = sp
            kl = np.ascontiguousarray(kernel.data[:, :, u, v].T)
            t = (xm @ kl).reshape(N, H, W, O)
            y[:, osl[0], osl[1]] += t[:, isl[0], isl[1]]
    if bias is not None:
        y += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _node(y, parents)

    def bwd():
        g = out.grad
        if bias is not None and bias.requires_grad_path():
            bias._accum(g.sum(axis=(0, 1, 2)))
        need_k = kernel.requires_grad_path()
        need_x = x.requires_grad_path()
        dk = np.zeros_like(kernel.data) if need_k else None
        dx = np.zeros((N, H, W, C), dtype=dtype) if need_x else None
        for u in range(kh):
            for v in range(kw):
                sp = spans(u, v)
                if sp is None:
                    continue
                osl, isl = sp
                gs = g[:, osl[0], osl[1]]
                if need_k:
                    xs = x.data[:, isl[0], isl[1]]
                    dk[:, :, u, v] = np.tensordot(gs, xs, axes=([0, 1, 2], [0, 1, 2]))
                if need_x:
                    kl = np.ascontiguousarray(kernel.data[:, :, u, v])
                    gm = np.ascontiguousarray(gs).reshape(-1, O)
                    dx[:, isl[0], isl[1]] += (gm @ kl).reshape(gs.shape[:3] + (C,))
        if need_k:
            kernel._accum(dk)
        if need_x:
            x._accum(dx)

    out._backward = bwd
    return out


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Spec-facing NCHW variant of conv2d_nhwc."""
    y = conv2d_nhwc(x.transpose((0, 2, 3, 1)), kernel, bias, stride=stride, pad=pad)
    return y.transpose((0, 3, 1, 2))


# -- pooling and upsampling ---------------------------------------------------


def max_pool2d(x):
    """2x2 max pooling with stride 2 on x[N,H,W,C]; H and W must be even."""
    N, H, W, C = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d: spatial dims must be even, got {H}x{W}")
    win = x.data.reshape(N, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    flat = np.ascontiguousarray(win).reshape(N, H // 2, W // 2, C, 4)
    idx = flat.argmax(axis=-1)
    out = _node(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (x,))

    def bwd():
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], out.grad[..., None], axis=-1)
        dx = dflat.reshape(N, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        x._accum(np.ascontiguousarray(dx).reshape(N, H, W, C))

    out._backward = bwd
    return out


def _pool3x3(x, mode):
    """3x3 stride-1 same-size min/max pool on x[N,H,W,C]; soft morphology basis."""
    N, H, W, C = x.data.shape
    fill = -np.inf if mode == "max" else np.inf
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    flat = np.ascontiguousarray(win).reshape(N, H, W, C, 9)
    idx = flat.argmax(axis=-1) if mode == "max" else flat.argmin(axis=-1)
    out = _node(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (x,))

    def bwd():
        dxp = np.zeros_like(xp)
        du, dv = np.unravel_index(idx, (3, 3))
        ii = np.arange(H)[None, :, None, None] + du
        jj = np.arange(W)[None, None, :, None] + dv
        nn = np.arange(N)[:, None, None, None]
        cc = np.arange(C)[None, None, None, :]
        np.add.at(dxp, (nn, ii, jj, cc), out.grad)
        x._accum(dxp[:, 1:-1, 1:-1, :])

    out._backward = bwd
    return out


def max_pool3x3(x):
    return _pool3x3(x, "max")


def min_pool3x3(x):
    return _pool3x3(x, "min")


def nearest_upsample2d(x):
    """Nearest-neighbour 2x upsampling of x[N,H,W,C]."""
    N, H, W, C = x.data.shape
    out = _node(x.data.repeat(2, axis=1).repeat(2, axis=2), (x,))

    def bwd():
        g = out.grad.reshape(N, H, 2, W, 2, C).sum(axis=(2, 4))
        x._accum(g)

    out._backward = bwd
    return out


# -- directional strip convolution --------------------------------------------


def strip_conv_nhwc(x, direction, w, b):
    """1D convolution along `direction` on x[N,H,W,C], zero padded.

    The kernel w[2k+1] is shared across channels; b is a scalar tensor.
    Z[i,j] = sum_l x[i + l dh, j + l dw] * w[k - l] + b.
    """
    if tuple(direction) not in STRIP_DIRECTIONS:
        raise ValueError(f"strip conv direction {direction} not in {STRIP_DIRECTIONS}")
    dh, dw = direction
    taps = w.data.shape[0]
    if taps % 2 == 0 or taps < 3:
        raise ValueError("strip kernel must have odd length >= 3")
    k = taps // 2
    N, H, W, C = x.data.shape
    ph, pw = k * abs(dh), k * abs(dw)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    def view(arr, l):
        return arr[:, ph + l * dh : ph + l * dh + H, pw + l * dw : pw + l * dw + W, :]

    z = np.full(x.data.shape, b.data, dtype=x.dtype)
    for l in range(-k, k + 1):
        z += view(xp, l) * w.data[k - l]
    out = _node(z, (x, w, b))

    def bwd():
        g = out.grad
        if b.requires_grad_path():
            b._accum(np.asarray(g.sum(), dtype=b.data.dtype).reshape(b.data.shape))
        if w.requires_grad_path():
            dw_ = np.zeros_like(w.data)
            for l in range(-k, k + 1):
                dw_[k - l] = (view(xp, l) * g).sum()
            w._accum(dw_)
        if x.requires_grad_path():
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            dx = np.zeros_like(x.data)
            for l in range(-k, k + 1):
                dx += view(gp, -l) * w.data[k - l]
            x._accum(dx)

    out._backward = bwd
    return out


def strip_conv_1d(f_hwc, direction, w, b):
    """Spec-facing single-image variant: f[H,W,C] -> z[H,W,C]."""
    h, wd, c = f_hwc.shape
    z = strip_conv_nhwc(f_hwc.reshape(1, h, wd, c), direction, w, b)
    return z.reshape(h, wd, c)


def hwc_to_nchw(a):
    """Array-layout converter between the channel-last math and NCHW callers."""
    return np.ascontiguousarray(np.transpose(a, (2, 0, 1))[None])


def nchw_to_hwc(a):
    return np.ascontiguousarray(np.transpose(a[0], (1, 2, 0)))
