"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record, define-by-run style, the
closures needed to backpropagate through every operation the model uses.
The graph is rebuilt on every forward pass, which keeps input-gradient
computation (needed by the attacks) trivial. Only the grad slot of a
tensor is mutated after construction; everything else is treated as
immutable, so independent graphs can run concurrently.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "InvalidArgumentError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "log_ratio",
    "conv2d",
    "dense",
    "linear",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "spatial_avg_pool",
    "spatial_max_pool",
    "channel_max",
    "reshape",
    "take",
    "softmax_cross_entropy",
    "sq_l2_distance_maps",
    "topo_order",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names both shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: operand shapes do not conform: "
                         + " vs ".join(str(s) for s in self.shapes))


class InvalidArgumentError(ValueError):
    """Raised for out-of-domain arguments (gamma <= 0, non-scalar loss, ...)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A fresh leaf holding the same data, cut from the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    """Wrap an op result, attaching the backward closure when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("add", x, y)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g, x.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g, y.shape))

    return _make(x.data + y.data, (x, y), bwd)


def sub(x, y):
    return add(x, scale(y, -1.0))


def mul(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("mul", x, y)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g * y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g * x.data, y.shape))

    return _make(x.data * y.data, (x, y), bwd)


def div(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast("div", x, y)
    out = x.data / y.data

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g / y.data, x.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(-g * out / y.data, y.shape))

    return _make(out, (x, y), bwd)


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * c)

    return _make(x.data * c, (x,), bwd)


def relu(x):
    x = _as_tensor(x)
    # subgradient at 0 is 0
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), bwd)


def log_ratio(u, gamma):
    """log((u + 1) / (u + gamma)) elementwise; gamma must be positive."""
    if not gamma > 0:
        raise InvalidArgumentError(f"log_ratio: gamma must be > 0, got {gamma}")
    u = _as_tensor(u)
    gamma = float(gamma)

    def bwd(g):
        if u.requires_grad:
            _accumulate(u, g * (1.0 / (u.data + 1.0) - 1.0 / (u.data + gamma)))

    return _make(np.log(u.data + 1.0) - np.log(u.data + gamma), (u,), bwd)


# ---------------------------------------------------------------------------
# convolution and matrix ops
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, oh, ow):
    b, _, _, c = xp.shape
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride,
                                        j:j + stride * ow:stride, :]
    return cols


def conv2d(x, kernel, stride=1, pad=0):
    """2-D convolution, channels-last.

    x: (H, W, Cin) or (B, H, W, Cin); kernel: (kh, kw, Cin, Cout).
    Symmetric zero padding of `pad` pixels; output spatial size
    (H + 2*pad - kh)//stride + 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4) or kernel.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    xd = x.data[None] if single else x.data
    kh, kw, cin, cout = kernel.shape
    b, h, w, c = xd.shape
    if c != cin:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(cols, kernel.data, axes=([3, 4, 5], [0, 1, 2]))

    def bwd(g):
        gb = g[None] if single else g
        if kernel.requires_grad:
            gk = np.tensordot(cols, gb, axes=([0, 1, 2], [0, 1, 2]))
            _accumulate(kernel, gk)
        if x.requires_grad:
            gcols = np.tensordot(gb, kernel.data, axes=([3], [3]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * oh:stride,
                        j:j + stride * ow:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
            _accumulate(x, gx[0] if single else gx)

    return _make(out[0] if single else out, (x, kernel), bwd)


def dense(x, w):
    """Contract the last axis of x with w: (..., Din) @ (Din, Dout).

    This is exactly a 1x1 convolution when x is a feature map.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("dense", x.shape, w.shape)
    out = x.data @ w.data

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.reshape(-1, w.shape[0]).T
                        @ g.reshape(-1, w.shape[1]))

    return _make(out, (x, w), bwd)


def linear(x, w):
    """Classifier map: w (K, m) applied to scores x (m,) or (B, m)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    out = x.data @ w.data.T

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            if x.data.ndim == 1:
                _accumulate(w, np.outer(g, x.data))
            else:
                _accumulate(w, g.T @ x.data)

    return _make(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reduce_sum(x, axes=None, keepdims=False):
    x = _as_tensor(x)
    axes_n = _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes_n, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes_n)
            _accumulate(x, np.broadcast_to(gg, x.shape).copy())

    return _make(out, (x,), bwd)


def reduce_mean(x, axes=None, keepdims=False):
    x = _as_tensor(x)
    axes_n = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes_n]))
    return scale(reduce_sum(x, axes_n, keepdims), 1.0 / n)


def _reduce_extreme(x, axes, keepdims, take_max):
    """max/min over `axes` with deterministic first-hit tie-breaking.

    Gradient is routed to the first extremal element under a row-major
    scan of the reduced axes.
    """
    x = _as_tensor(x)
    axes_n = _norm_axes(axes, x.data.ndim)
    kept = tuple(a for a in range(x.data.ndim) if a not in axes_n)
    perm = kept + axes_n
    moved = np.transpose(x.data, perm)
    outer = int(np.prod([x.shape[a] for a in kept])) if kept else 1
    inner = int(np.prod([x.shape[a] for a in axes_n]))
    flat = moved.reshape(outer, inner)
    idx = np.argmax(flat, axis=1) if take_max else np.argmin(flat, axis=1)
    vals = flat[np.arange(outer), idx]
    out_shape = tuple(x.shape[a] for a in kept)
    out = vals.reshape(out_shape)
    if keepdims:
        out = np.expand_dims(out, axes_n)

    def bwd(g):
        if not x.requires_grad:
            return
        gflat = g.reshape(outer)
        gmoved = np.zeros((outer, inner), dtype=np.float64)
        gmoved[np.arange(outer), idx] = gflat
        gmoved = gmoved.reshape(moved.shape)
        _accumulate(x, np.transpose(gmoved, np.argsort(perm)))

    return _make(out, (x,), bwd)


def reduce_max(x, axes=None, keepdims=False):
    return _reduce_extreme(x, axes, keepdims, take_max=True)


def reduce_min(x, axes=None, keepdims=False):
    return _reduce_extreme(x, axes, keepdims, take_max=False)


def spatial_avg_pool(x):
    """Global average over the H, W axes of (..., H, W, C)."""
    if _as_tensor(x).data.ndim < 3:
        raise ShapeError("spatial_avg_pool", _as_tensor(x).shape)
    return reduce_mean(x, axes=(-3, -2))


def spatial_max_pool(x):
    """Global max over the H, W axes of (..., H, W, C)."""
    if _as_tensor(x).data.ndim < 3:
        raise ShapeError("spatial_max_pool", _as_tensor(x).shape)
    return reduce_max(x, axes=(-3, -2))


def channel_max(x):
    """Max over the trailing channel axis."""
    return reduce_max(x, axes=-1)


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), bwd)


def take(x, indices, axis=-1):
    """Gather fixed integer indices along one axis."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis_n = axis % x.data.ndim
    out = np.take(x.data, indices, axis=axis_n)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None),) * axis_n + (indices,), g)
            _accumulate(x, gx)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses and distances
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Cross entropy with integrated softmax.

    logits (K,) with an int label gives the per-sample loss; logits
    (B, K) with labels (B,) gives the mean over the batch.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim == 1:
        lab = int(labels)
        z = logits.data - logits.data.max()
        lse = np.log(np.exp(z).sum())
        p = np.exp(z - lse)

        def bwd(g):
            if logits.requires_grad:
                gl = p.copy()
                gl[lab] -= 1.0
                _accumulate(logits, g * gl)

        return _make(lse - z[lab], (logits,), bwd)

    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    labs = np.asarray(labels, dtype=np.intp)
    if labs.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labs.shape)
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    p = np.exp(z - lse[:, None])
    losses = lse - z[np.arange(b), labs]

    def bwd(g):
        if logits.requires_grad:
            gl = p.copy()
            gl[np.arange(b), labs] -= 1.0
            _accumulate(logits, g * gl / b)

    return _make(losses.mean(), (logits,), bwd)


def sq_l2_distance_maps(z, protos):
    """Squared L2 distance between every local vector and every prototype.

    z: (..., D) local features (typically (H, W, D) or (B, H, W, D));
    protos: (m, D). Output: (..., m) with out[..., l] = ||z[...] - p_l||^2.
    """
    z, protos = _as_tensor(z), _as_tensor(protos)
    if protos.data.ndim != 2 or z.shape[-1] != protos.shape[-1]:
        raise ShapeError("sq_l2_distance_maps", z.shape, protos.shape)
    diff = z.data[..., None, :] - protos.data  # (..., m, D)
    out = np.einsum("...md,...md->...m", diff, diff)

    def bwd(g):
        if z.requires_grad:
            _accumulate(z, 2.0 * np.einsum("...m,...md->...d", g, diff))
        if protos.requires_grad:
            m, d = protos.shape
            _accumulate(protos, -2.0 * np.einsum(
                "nm,nmd->md", g.reshape(-1, m), diff.reshape(-1, m, d)))

    return _make(out, (z, protos), bwd)


# ---------------------------------------------------------------------------
# graph traversal and backprop
# ---------------------------------------------------------------------------

def topo_order(root):
    """Nodes reachable from root, topologically ordered (inputs first)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, leaves=None):
    """Backpropagate from a scalar loss; fill grads of all reached tensors.

    Leaves passed in that the loss does not reach get a zero grad so the
    caller can treat every parameter uniformly.
    """
    if loss.data.shape != ():
        raise InvalidArgumentError(
            f"backward: loss must be scalar-shaped, got shape {loss.data.shape}")
    order = topo_order(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(fn, x, h=1e-5, tol=1e-4):
    """Compare the autodiff gradient of fn w.r.t. x against central differences.

    fn maps a Tensor to a Tensor; non-scalar outputs are contracted with a
    fixed random functional so the full Jacobian action is exercised.
    Returns (passed, max_relative_error); never raises on a mismatch.
    """
    if not h > 0:
        raise InvalidArgumentError(f"finite_diff_check: h must be > 0, got {h}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with no_grad():
        out_shape = fn(Tensor(x0)).shape
    probe = np.random.default_rng(20240817).standard_normal(out_shape)

    def scalar_fn(arr):
        with no_grad():
            y = fn(Tensor(arr))
        return float((y.data * probe).sum())

    leaf = Tensor(x0.copy(), requires_grad=True)
    y = fn(leaf)
    backward(reduce_sum(mul(y, Tensor(probe))), leaves=[leaf])
    analytic = leaf.grad

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn(x0)
        flat[i] = orig - h
        fm = scalar_fn(x0)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float((np.abs(analytic - numeric) / denom).max()) if x0.size else 0.0
    return max_rel < tol, max_rel
