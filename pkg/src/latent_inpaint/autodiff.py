"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and, when gradients are enabled, remembers
the primitive that created it together with one VJP closure per input.
The closures are written in terms of other Tensor primitives, so running
a backward pass with ``create_graph=True`` records a new graph and the
result can be differentiated again.  That second-order capability is
what the training loop's gradient-norm penalty relies on.

Conventions:
  * float64 is the default dtype; tests depend on the headroom.
  * ReLU and abs are treated as piecewise-linear with zero curvature:
    their backward reuses the forward sign mask as a constant.
  * Gradient buffers (`Tensor.grad`) are plain ndarrays and accumulate
    across `backward` calls; callers zero them explicitly.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64


class _EngineState(threading.local):
    # a tape is confined to one thread; each thread gets its own flag
    def __init__(self):
        self.grad_enabled = True


_state = _EngineState()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (current thread only)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    """Creator record: the inputs of a primitive and their VJP closures."""

    __slots__ = ("inputs", "vjps", "name")

    def __init__(self, inputs, vjps, name):
        self.inputs = inputs
        self.vjps = vjps
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "creator")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.creator = None

    # ---- housekeeping -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf sharing this tensor's data, outside any graph."""
        return Tensor(self.data, requires_grad=False)

    def requires_grad_(self, flag=True):
        if self.creator is not None:
            raise ValueError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def zero_grad(self):
        self.grad = None

    # ---- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, _ensure(other))

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_ensure(other)))

    def __rsub__(self, other):
        return add(_ensure(other), neg(self))

    def __mul__(self, other):
        return mul(self, _ensure(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _ensure(other))

    def __rtruediv__(self, other):
        return div(_ensure(other), self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    # ---- shape ops as methods -------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def sqrt(self):
        return pow_const(self, 0.5)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)


def _ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, dtype=None):
    """A leaf tensor that participates in gradient computation."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _from_op(data, inputs, vjps, name):
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.creator = _Node(tuple(inputs), tuple(vjps), name)
    return out


def _sum_to(g, shape):
    """Reduce a broadcasted gradient back to `shape` (differentiably)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


# ---- primitives ----------------------------------------------------------


def add(a, b):
    return _from_op(
        a.data + b.data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
        "add",
    )


def neg(a):
    return _from_op(-a.data, (a,), (lambda g: neg(g),), "neg")


def mul(a, b):
    return _from_op(
        a.data * b.data,
        (a, b),
        (lambda g: _sum_to(mul(g, b), a.shape), lambda g: _sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a, b):
    return _from_op(
        a.data / b.data,
        (a, b),
        (
            lambda g: _sum_to(div(g, b), a.shape),
            lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
        "div",
    )


def pow_const(a, p):
    p = float(p)
    return _from_op(
        a.data**p,
        (a,),
        (lambda g: mul(g, mul_const(pow_const(a, p - 1.0), p)),),
        "pow",
    )


def mul_const(a, c):
    c = float(c)
    return _from_op(a.data * c, (a,), (lambda g: mul_const(g, c),), "mul_const")


def exp(a):
    # the vjp closes over `out`, assigned before any backward can run
    out = _from_op(np.exp(a.data), (a,), (lambda g: mul(g, out),), "exp")
    return out


def log(a):
    return _from_op(np.log(a.data), (a,), (lambda g: div(g, a),), "log")


def tanh(a):
    out = _from_op(np.tanh(a.data), (a,), (lambda g: mul(g, 1.0 - mul(out, out)),), "tanh")
    return out


def relu(a):
    mask = (a.data > 0).astype(a.data.dtype)
    # second derivative taken as zero a.e.: the mask is a constant
    return _from_op(a.data * mask, (a,), (lambda g: mul(g, Tensor(mask)),), "relu")


def tabs(a):
    sgn = np.sign(a.data)
    return _from_op(np.abs(a.data), (a,), (lambda g: mul(g, Tensor(sgn)),), "abs")


def tsum(a, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g):
        return broadcast_to(reshape(g, kept), a.shape)

    return _from_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), (vjp,), "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul_const(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    shape = tuple(shape)
    return _from_op(a.data.reshape(shape), (a,), (lambda g: reshape(g, a.shape),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,), (lambda g: transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _from_op(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        (lambda g: _sum_to(g, a.shape),),
        "broadcast_to",
    )


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors of rank >= 2")

    def vjp_a(g):
        return _sum_to(matmul(g, b.swapaxes(-1, -2)), a.shape)

    def vjp_b(g):
        return _sum_to(matmul(a.swapaxes(-1, -2), g), b.shape)

    return _from_op(np.matmul(a.data, b.data), (a, b), (vjp_a, vjp_b), "matmul")


def narrow(a, axis, start, length):
    """Slice `length` entries of one axis starting at `start`."""
    axis = axis % a.ndim
    dim = a.shape[axis]
    if start < 0 or start + length > dim:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis of size {dim}")
    idx = tuple(slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim))
    return _from_op(
        a.data[idx].copy(),
        (a,),
        (lambda g: pad_axis(g, axis, start, dim - start - length),),
        "narrow",
    )


def pad_axis(a, axis, before, after):
    """Zero-pad one axis; adjoint of narrow."""
    axis = axis % a.ndim
    widths = tuple((before, after) if i == axis else (0, 0) for i in range(a.ndim))
    return _from_op(
        np.pad(a.data, widths),
        (a,),
        (lambda g: narrow(g, axis, before, a.shape[axis]),),
        "pad_axis",
    )


def concat(tensors, axis):
    tensors = [_ensure(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(i):
        return lambda g: narrow(g, axis, int(offsets[i]), sizes[i])

    return _from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
        "concat",
    )


def _conv_geometry(h, w, k, stride, pad):
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"invalid conv geometry k={k} stride={stride} pad={pad}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ShapeError(
            f"output size not integral: ({h}+2*{pad}-{k}) not divisible by stride {stride}"
        )
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(a, k, stride=1, pad=0):
    """Unfold [N,C,H,W] into convolution columns [N, C*k*k, Ho*Wo]."""
    if a.ndim != 4:
        raise ShapeError("im2col expects a 4-d tensor")
    n, c, h, w = a.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    xp = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,Ho,Wo,k,k]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)

    def vjp(g):
        return col2im(g, (n, c, h, w), k, stride, pad)

    return _from_op(cols, (a,), (vjp,), "im2col")


def col2im(cols, img_shape, k, stride=1, pad=0):
    """Fold columns back into [N,C,H,W], accumulating overlaps; adjoint of im2col."""
    n, c, h, w = img_shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    if cols.shape != (n, c * k * k, ho * wo):
        raise ShapeError(f"col2im expected shape {(n, c * k * k, ho * wo)}, got {cols.shape}")
    cols6 = cols.data.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.data.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[
                :, :, i, j
            ]
    out = xp[:, :, pad : pad + h, pad : pad + w]

    def vjp(g):
        return im2col(g, k, stride, pad)

    return _from_op(out.copy(), (cols,), (vjp,), "col2im")


# ---- composite operations -------------------------------------------------


def conv2d(x, kernel, stride=1, pad=0):
    """2-d cross-correlation of [N,C,H,W] with kernels [F,C,k,k]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, image has {c}")
    ho, wo = _conv_geometry(h, w, kh, stride, pad)
    cols = im2col(x, kh, stride, pad)
    out = matmul(reshape(kernel, (f, c * kh * kh)), cols)  # [N,F,Ho*Wo]
    return reshape(out, (n, f, ho, wo))


def layer_norm(x, gain, bias, eps=1e-5, axes=None):
    """Normalize each sample over its feature axes, then apply affine.

    For rank >= 2 inputs axis 0 is the batch axis and normalization runs
    over all remaining axes; a rank-1 input is a single sample.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if axes is None:
        axes = tuple(range(x.ndim)) if x.ndim == 1 else tuple(range(1, x.ndim))
    mu = tmean(x, axes, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axes, keepdims=True)
    xn = xc / (var + eps).sqrt()
    return _ensure(gain) * xn + _ensure(bias)


def spatial_gradient(img):
    """Finite-difference gradients (gx, gy) along the last two axes.

    Central differences in the interior, one-sided at the borders.
    """
    if img.ndim < 2 or img.shape[-1] < 3 or img.shape[-2] < 3:
        raise ShapeError("spatial_gradient needs at least 3 pixels per axis")

    def along(axis):
        n = img.shape[axis]
        first = narrow(img, axis, 1, 1) - narrow(img, axis, 0, 1)
        inner = mul_const(narrow(img, axis, 2, n - 2) - narrow(img, axis, 0, n - 2), 0.5)
        last = narrow(img, axis, n - 1, 1) - narrow(img, axis, n - 2, 1)
        return concat([first, inner, last], axis)

    return along(img.ndim - 1), along(img.ndim - 2)


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of [N,C,H,W]."""
    n, c, h, w = x.shape
    y = reshape(x, (n, c, h, 1, w, 1))
    y = broadcast_to(y, (n, c, h, 2, w, 2))
    return reshape(y, (n, c, 2 * h, 2 * w))


def avg_pool2(x):
    """2x2 mean pooling of [N,C,H,W]; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 requires even spatial dimensions")
    y = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return tmean(y, axis=(3, 5))


# ---- reverse pass ---------------------------------------------------------


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for t in node.creator.inputs:
                if t.requires_grad and id(t) not in seen:
                    stack.append((t, False))
    return order  # inputs appear before the tensors computed from them


def _run_backward(root, seed, create_graph):
    grads = {id(root): seed}
    order = _toposort(root)
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.creator is None:
            continue
        for inp, vjp in zip(t.creator.inputs, t.creator.vjps):
            if vjp is None or not inp.requires_grad:
                continue
            gi = vjp(g)
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    return grads


def backward(loss):
    """Accumulate dLoss/dLeaf into `.grad` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any differentiable input")
    seed = Tensor(np.ones_like(loss.data))
    with no_grad():
        grads = _run_backward(loss, seed, create_graph=False)
    for t in _toposort(loss):
        if t.creator is None and t.requires_grad and id(t) in grads:
            contrib = grads[id(t)].data
            t.grad = contrib.copy() if t.grad is None else t.grad + contrib


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar `output` w.r.t. `inputs`, as tensors.

    With `create_graph=True` the returned tensors carry their own graph
    and can be differentiated again (double backprop).
    """
    if output.size != 1:
        raise ShapeError("grad requires a scalar output")
    if not output.requires_grad:
        raise ValueError("output is not connected to any differentiable input")
    seed = Tensor(np.ones_like(output.data))
    if create_graph:
        grads = _run_backward(output, seed, create_graph=True)
    else:
        with no_grad():
            grads = _run_backward(output, seed, create_graph=False)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def input_gradient_norm(f, x, create_graph=True):
    """L2 norm of df/dx as a differentiable tensor.

    If `f(x)` yields one value per sample along axis 0, the result holds
    one norm per sample; a scalar `f` gives a scalar norm.  The returned
    tensor stays connected to the parameters inside `f`, so penalties
    built from it support double backprop.
    """
    x = x.detach().requires_grad_(True)
    y = f(x)
    per_sample = y.size > 1
    if per_sample and y.shape[0] != x.shape[0]:
        raise ShapeError("non-scalar critic output must be one value per sample")
    (gx,) = grad(y.sum() if per_sample else y, [x], create_graph=create_graph)
    sq = gx * gx
    if per_sample:
        total = tsum(reshape(sq, (x.shape[0], -1)), axis=1)
    else:
        total = tsum(sq)
    return total.sqrt()


def zero_grads(params):
    for p in params:
        p.grad = None
