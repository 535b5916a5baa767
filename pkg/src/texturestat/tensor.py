"""Dense float64 tensors with per-operator reverse-mode gradients.

Every value in this package is a `Tensor`: a numpy float64 array plus a
gradient slot and a link into the graph that produced it.  Operands that are
plain numbers or numpy arrays are treated as constants (no gradient).
Gradients accumulate into `.grad`; call `backward()` on a scalar result.
Accumulation order is the fixed graph order, so repeated runs are bitwise
identical.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""


class TsrFormatError(ValueError):
    """A TSR1 file is malformed; the message carries the byte offset."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """N-d float64 array with an attached gradient slot."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`.

        `self` must be scalar.  Intermediate node grads are freshly zeroed;
        leaf grads (parameters, inputs) accumulate across calls until the
        caller resets them.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output, got shape %s" % (self.shape,))
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(other, self, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(other, self, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return _unary(self, lambda a: a ** p, lambda g, a, out: g * p * a ** (p - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- structure ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _unary(self, lambda a: a.reshape(shape),
                      lambda g, a, out: g.reshape(src))

    def transpose(self, axes=None):
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _unary(self, lambda a: a.transpose(axes),
                      lambda g, a, out: g.transpose(inv))

    @property
    def T(self):
        return self.transpose()

    def slice_axis(self, axis, start, stop):
        """Contiguous slice along one axis."""
        nd = self.ndim
        if not -nd <= axis < nd:
            raise ShapeError("slice axis %d out of range for rank %d" % (axis, nd))
        axis = axis % nd
        sl = [slice(None)] * nd
        sl[axis] = slice(start, stop)
        sl = tuple(sl)
        src = self.shape

        def bwd(g, a, out):
            buf = np.zeros(src)
            buf[sl] = g
            return buf

        return _unary(self, lambda a: a[sl].copy(), bwd)

    def broadcast_to(self, shape):
        src = self.shape
        return _unary(self, lambda a: np.broadcast_to(a, shape).copy(),
                      lambda g, a, out: _unbroadcast(g, src))

    # ---- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bwd(g, a, out):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape)

        return _unary(self, lambda a: a.sum(axis=axis, keepdims=keepdims), bwd)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else np.prod(
            [self.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

        def bwd(g, a, out):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape) / count

        return _unary(self, lambda a: a.mean(axis=axis, keepdims=keepdims), bwd)

    # ---- pointwise nonlinearities ---------------------------------------------------

    def abs(self):
        return _unary(self, np.abs, lambda g, a, out: g * np.sign(a))

    def exp(self):
        return _unary(self, np.exp, lambda g, a, out: g * out)

    def log(self):
        return _unary(self, np.log, lambda g, a, out: g / a)

    def sqrt(self):
        # subgradient 0 at the origin: exact-zero vectors (e.g. pixels dropped
        # by the quantization window) are locally constant, so their true
        # chain gradient is zero and 0.5/0 would only manufacture a NaN
        def bwd(g, a, out):
            return np.where(out > 0.0, g * 0.5 / np.where(out > 0.0, out, 1.0), 0.0)

        return _unary(self, np.sqrt, bwd)

    def __repr__(self):
        return "Tensor(shape=%s)" % (self.shape,)


def _value_of(x):
    return x.data if isinstance(x, Tensor) else _as_array(x)


def _binary(a, b, fwd, da, db):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    av, bv = _value_of(a), _value_of(b)
    out_val = fwd(av, bv)
    parents = tuple(t for t, w in ((a, ta), (b, tb)) if w)

    def bwd(g):
        if ta:
            a.grad += _unbroadcast(da(g, av, bv), av.shape)
        if tb:
            b.grad += _unbroadcast(db(g, av, bv), bv.shape)

    return Tensor(out_val, parents, bwd)


def _unary(a, fwd, da):
    av = a.data
    out_val = fwd(av)

    def bwd(g):
        a.grad += da(g, av, out_val)

    return Tensor(out_val, (a,), bwd)


# ---- operators with bespoke backwards ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Strict 2-d matrix product [m x k] @ [k x n]."""
    av, bv = _value_of(a), _value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul: incompatible shapes %s and %s" % (av.shape, bv.shape))
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    parents = tuple(t for t, w in ((a, ta), (b, tb)) if w)

    def bwd(g):
        if ta:
            a.grad += g @ bv.T
        if tb:
            b.grad += av.T @ g

    return Tensor(av @ bv, parents, bwd)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xv = x.data
    scale = np.where(xv >= 0.0, 1.0, slope)
    return _unary(x, lambda a: a * scale, lambda g, a, out: g * scale)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Exponentials normalized along `axis`; max-subtracted for stability."""
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError("softmax axis %d out of range for rank %d" % (axis, nd))
    xv = x.data
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        x.grad += y * (g - (g * y).sum(axis=axis, keepdims=True))

    return Tensor(y, (x,), bwd)


def max_all(x: Tensor) -> Tensor:
    """Max over all elements; gradient routes to the first arg-max."""
    idx = int(np.argmax(x.data))

    def bwd(g):
        flat = x.grad.reshape(-1)
        flat[idx] += g.item() if isinstance(g, np.ndarray) else g

    return Tensor(x.data.reshape(-1)[idx], (x,), bwd)


def min_all(x: Tensor) -> Tensor:
    idx = int(np.argmin(x.data))

    def bwd(g):
        flat = x.grad.reshape(-1)
        flat[idx] += g.item() if isinstance(g, np.ndarray) else g

    return Tensor(x.data.reshape(-1)[idx], (x,), bwd)


def concat(parts, axis=0) -> Tensor:
    """Concatenate tensors (or constant arrays) along an axis."""
    vals = [_value_of(p) for p in parts]
    out_val = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Tensor)]

    def bwd(g):
        for i, p in tracked:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            p.grad += g[tuple(sl)]

    return Tensor(out_val, tuple(p for _, p in tracked), bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    """Per-channel mean of a [C x H x W] map."""
    if a.ndim != 3:
        raise ShapeError("global_avg_pool expects rank 3, got shape %s" % (a.shape,))
    c, h, w = a.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool on empty spatial extent %s" % (a.shape,))
    return a.reshape(c, h * w).mean(axis=1)


def nearest_upsample(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor upsample of a [C x h x w] map via floor index mapping."""
    if a.ndim != 3:
        raise ShapeError("nearest_upsample expects rank 3, got shape %s" % (a.shape,))
    c, h, w = a.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("nearest_upsample target size %dx%d is empty" % (out_h, out_w))
    if out_h < h or out_w < w:
        raise ShapeError("nearest_upsample cannot shrink %s to %dx%d" % (a.shape, out_h, out_w))
    ridx = (np.arange(out_h) * h) // out_h
    cidx = (np.arange(out_w) * w) // out_w

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (slice(None), ridx[:, None], cidx[None, :]), g)
        a.grad += acc

    return Tensor(a.data[:, ridx[:, None], cidx[None, :]], (a,), bwd)


def avg_pool2d(a: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of a [C x H x W] map by an integer factor."""
    if a.ndim != 3:
        raise ShapeError("avg_pool2d expects rank 3, got shape %s" % (a.shape,))
    c, h, w = a.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError("avg_pool2d: factor %d does not divide %s" % (factor, (h, w)))
    oh, ow = h // factor, w // factor

    def bwd(g):
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
        a.grad += up / (factor * factor)

    pooled = a.data.reshape(c, oh, factor, ow, factor).mean(axis=(2, 4))
    return Tensor(pooled, (a,), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d convolution of a single [Cin x H x W] map (im2col implementation)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d expects [C,H,W] input and [O,C,kh,kw] weight")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError("conv2d: input channels %d != weight channels %d" % (cin, cin_w))
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < eff_h or wp < eff_w:
        raise ShapeError("conv2d: padded input %s smaller than kernel extent %s"
                         % ((hp, wp), (eff_h, eff_w)))
    oh = (hp - eff_h) // stride + 1
    ow = (wp - eff_w) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, kh, kw, oh * ow))
    for i in range(kh):
        r0 = i * dilation
        r1 = r0 + stride * (oh - 1) + 1
        for j in range(kw):
            c0 = j * dilation
            c1 = c0 + stride * (ow - 1) + 1
            cols[:, i, j, :] = xp[:, r0:r1:stride, c0:c1:stride].reshape(cin, -1)
    cols2 = cols.reshape(cin * kh * kw, oh * ow)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_val = (wmat @ cols2 + bias.data[:, None]).reshape(cout, oh, ow)

    def bwd(g):
        gm = g.reshape(cout, -1)
        weight.grad += (gm @ cols2.T).reshape(weight.shape)
        bias.grad += gm.sum(axis=1)
        dcols = (wmat.T @ gm).reshape(cin, kh, kw, oh * ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            r0 = i * dilation
            r1 = r0 + stride * (oh - 1) + 1
            for j in range(kw):
                c0 = j * dilation
                c1 = c0 + stride * (ow - 1) + 1
                dxp[:, r0:r1:stride, c0:c1:stride] += dcols[:, i, j, :].reshape(cin, oh, ow)
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        x.grad += dxp

    return Tensor(out_val, (x, weight, bias), bwd)


# ---- layers ---------------------------------------------------------------------------


@dataclass
class LinearLayer:
    """Affine map y = W x + b with W [out x in] and b [out]."""
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1 \
                or self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError("linear layer dims disagree: weight %s bias %s"
                             % (self.weight.shape, self.bias.shape))

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Two affine layers; the first is followed by a leaky rectifier."""
    l1: LinearLayer
    l2: LinearLayer


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> LinearLayer:
    """Uniform init in [-1/sqrt(in_dim), +1/sqrt(in_dim)] for weight and bias."""
    bound = 1.0 / np.sqrt(in_dim)
    return LinearLayer(Tensor(rng.uniform(-bound, bound, (out_dim, in_dim))),
                       Tensor(rng.uniform(-bound, bound, out_dim)))


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> Mlp:
    return Mlp(init_linear(rng, in_dim, hidden), init_linear(rng, hidden, out_dim))


def apply_mlp(x: Tensor, l1: LinearLayer, l2: LinearLayer, leak: float = 0.01) -> Tensor:
    """Row-wise two-layer perceptron: l2(leaky_relu(l1(x))), no final activation."""
    if not 0.0 <= leak < 1.0:
        raise ValueError("leak must lie in [0, 1), got %r" % leak)
    if x.ndim != 2 or x.shape[1] != l1.in_dim:
        raise ShapeError("mlp input %s does not match first layer in_dim %d"
                         % (x.shape, l1.in_dim))
    if l2.in_dim != l1.out_dim:
        raise ShapeError("mlp layer dims do not chain: %d -> %d" % (l1.out_dim, l2.in_dim))
    h = leaky_relu(matmul(x, l1.weight.T) + l1.bias, leak)
    return matmul(h, l2.weight.T) + l2.bias


def apply_linear_cols(layer: LinearLayer, d: Tensor) -> Tensor:
    """Shared affine map over each column of d [C x N] (a 1x1 projection)."""
    if d.ndim != 2 or d.shape[0] != layer.in_dim:
        raise ShapeError("column input %s does not match layer in_dim %d"
                         % (d.shape, layer.in_dim))
    return matmul(layer.weight, d) + layer.bias.reshape(-1, 1)


# ---- gradient verification --------------------------------------------------------------


def check_gradient(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient at x and central differences.

    f must map x to a scalar Tensor and be evaluable at x +/- eps per coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError("check_gradient needs a scalar-valued f")
    out.backward()
    analytic = x.grad.copy()
    if not np.isfinite(analytic).all() or not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite values in analytic pass")
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).data.item()
        flat[i] = orig - eps
        fm = f(x).data.item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite value in finite-difference pass")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
    return worst


# ---- TSR1 binary tensor files --------------------------------------------------------------

_TSR_MAGIC = b"TSR1"


def save_tsr(t, path):
    """Write a tensor (or array) as TSR1: magic, u32 rank, u64 dims, f64 payload (LE)."""
    arr = _value_of(t)
    dims = arr.shape
    with open(path, "wb") as fh:
        fh.write(_TSR_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        if dims:
            fh.write(struct.pack("<%dQ" % len(dims), *dims))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tsr(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TSR_MAGIC:
        raise TsrFormatError("%s: bad magic at byte 0" % path)
    if len(raw) < 8:
        raise TsrFormatError("%s: truncated header at byte %d" % (path, len(raw)))
    rank = struct.unpack_from("<I", raw, 4)[0]
    need = 8 + 8 * rank
    if len(raw) < need:
        raise TsrFormatError("%s: truncated dims at byte %d" % (path, len(raw)))
    dims = struct.unpack_from("<%dQ" % rank, raw, 8) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    expected = need + 8 * count
    if len(raw) != expected:
        raise TsrFormatError("%s: payload ends at byte %d, expected %d"
                             % (path, len(raw), expected))
    data = np.frombuffer(raw, dtype="<f8", offset=need, count=count)
    return Tensor(data.astype(np.float64).reshape(dims))
