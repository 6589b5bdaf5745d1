"""Minimal reverse-mode automatic differentiation over dense real tensors.

A :class:`Tape` records every operation in execution order; nodes therefore
appear in topological order and :func:`backward` visits them exactly once in
reverse.  Values are plain numpy arrays (float64 by default, float32 via
:func:`set_default_dtype`).  Broadcasting is deliberately restricted to the
bias-add pattern (a rank-1 vector against the last axis of a higher-rank
array) so every backward rule stays small and auditable.

Only the machinery needed for MLPs, input masks, affine image warps and
relaxed-Bernoulli gates is provided: no convolutions, no normalization
layers, no graph optimization.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit

_DTYPE = np.float64
_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""


def set_default_dtype(dtype) -> None:
    """Switch the element type for newly created tensors (float64/float32)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Check every forward value for NaN/Inf (slow; used by the test suite)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_value(value) -> np.ndarray:
    arr = np.asarray(value, dtype=_DTYPE)
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value entering the tape")
    return arr


class Node:
    """One tape entry: a value plus enough context to run its backward rule."""

    __slots__ = ("tape", "nid", "value", "op", "parents", "vjp", "needs_grad")

    def __init__(self, tape, nid, value, op, parents, vjp, needs_grad):
        self.tape = tape
        self.nid = nid
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.nid}, op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of operations; single-threaded during build/backward."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, op, value, parents=(), vjp=None, needs_grad=None) -> Node:
        value = _as_value(value)
        value.setflags(write=False)
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        node = Node(self, len(self.nodes), value, op, tuple(parents),
                    vjp if needs_grad else None, needs_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """A differentiable input; gradients are reported for leaves."""
        return self._record("leaf", np.array(value, dtype=_DTYPE), needs_grad=True)

    def constant(self, value) -> Node:
        """A non-differentiable input (data, noise draws, fixed masks)."""
        return self._record("const", np.array(value, dtype=_DTYPE), needs_grad=False)


class Gradients:
    """Map from leaf node to gradient array; a missing entry means zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, node: Node) -> np.ndarray:
        g = self._grads.get(node.nid)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def __contains__(self, node: Node) -> bool:
        return node.nid in self._grads


def backward(root: Node) -> Gradients:
    """Exact reverse-mode gradients of a scalar root for every leaf."""
    if root.value.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    acc = {root.nid: np.array(1.0, dtype=root.value.dtype)}
    leaf_grads = {}
    for node in reversed(tape.nodes[: root.nid + 1]):
        g = acc.pop(node.nid, None)
        if g is None or not node.needs_grad:
            continue
        if node.op == "leaf":
            leaf_grads[node.nid] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            prev = acc.get(parent.nid)
            acc[parent.nid] = pg if prev is None else prev + pg
    return Gradients(leaf_grads)


# ---------------------------------------------------------------------------
# shape helpers

def _binary_shapes(op, a, b):
    """Same shape, or rank-1 vector against the last axis (bias-add rule)."""
    if a.value.shape == b.value.shape:
        return "same"
    if b.value.ndim == 1 and a.value.ndim >= 2 and a.value.shape[-1] == b.value.shape[0]:
        return "vec_b"
    if a.value.ndim == 1 and b.value.ndim >= 2 and b.value.shape[-1] == a.value.shape[0]:
        return "vec_a"
    raise ShapeError(f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}")


def _sum_to_vec(g: np.ndarray) -> np.ndarray:
    """Reduce a broadcast gradient back to the rank-1 operand."""
    return g.sum(axis=tuple(range(g.ndim - 1)))


# ---------------------------------------------------------------------------
# primitives

def add(a: Node, b: Node) -> Node:
    kind = _binary_shapes("add", a, b)
    if kind == "same":
        vjp = lambda g: (g, g)
    elif kind == "vec_b":
        vjp = lambda g: (g, _sum_to_vec(g))
    else:
        vjp = lambda g: (_sum_to_vec(g), g)
    return a.tape._record("add", a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    kind = _binary_shapes("sub", a, b)
    if kind == "same":
        vjp = lambda g: (g, -g)
    elif kind == "vec_b":
        vjp = lambda g: (g, -_sum_to_vec(g))
    else:
        vjp = lambda g: (_sum_to_vec(g), -g)
    return a.tape._record("sub", a.value - b.value, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    kind = _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    if kind == "same":
        vjp = lambda g: (g * bv, g * av)
    elif kind == "vec_b":
        vjp = lambda g: (g * bv, _sum_to_vec(g * av))
    else:
        vjp = lambda g: (_sum_to_vec(g * bv), g * av)
    return a.tape._record("mul", av * bv, (a, b), vjp)


def neg(a: Node) -> Node:
    return a.tape._record("neg", -a.value, (a,), lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    """Multiply by a fixed python scalar (not differentiable in c)."""
    c = float(c)
    return a.tape._record("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape._record("matmul", av @ bv, (a, b),
                          lambda g: (g @ bv.T, av.T @ g))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape._record("relu", np.where(mask, a.value, 0.0), (a,),
                          lambda g: (g * mask,))


def gelu(a: Node) -> Node:
    """Exact GeLU x * Phi(x) via the error function (not the tanh form)."""
    x = a.value
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return a.tape._record("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a: Node) -> Node:
    p = _expit(a.value)
    return a.tape._record("sigmoid", p, (a,), lambda g: (g * p * (1.0 - p),))


def log(a: Node) -> Node:
    av = a.value
    return a.tape._record("log", np.log(av), (a,), lambda g: (g / av,))


def exp(a: Node) -> Node:
    ev = np.exp(a.value)
    return a.tape._record("exp", ev, (a,), lambda g: (g * ev,))


def cos(a: Node) -> Node:
    sv = np.sin(a.value)
    return a.tape._record("cos", np.cos(a.value), (a,), lambda g: (-g * sv,))


def sin(a: Node) -> Node:
    cv = np.cos(a.value)
    return a.tape._record("sin", np.sin(a.value), (a,), lambda g: (g * cv,))


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.tape._record("sum", a.value.sum(), (a,),
                          lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Node) -> Node:
    n = a.value.size
    shape = a.value.shape
    return a.tape._record("mean", a.value.mean(), (a,),
                          lambda g: (np.broadcast_to(g / n, shape),))


def mean_axis(a: Node, axis: int) -> Node:
    n = a.value.shape[axis]
    return a.tape._record(
        "mean_axis", a.value.mean(axis=axis), (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), a.value.shape),))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape._record("reshape", a.value.reshape(shape), (a,),
                          lambda g: (g.reshape(old),))


def concat(nodes, axis: int = 0) -> Node:
    nodes = list(nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return nodes[0].tape._record(
        "concat", np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
        lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return a.tape._record("slice", a.value[idx], (a,), vjp)


def gather_rows(a: Node, indices) -> Node:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows indices must be 1-D, got shape {idx.shape}")

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._record("gather_rows", a.value[idx], (a,), vjp)


def pick_columns(a: Node, columns) -> Node:
    """out[i] = a[i, columns[i]] for a 2-D input."""
    if a.value.ndim != 2:
        raise ShapeError(f"pick_columns expects a 2-D input, got {a.value.shape}")
    cols = np.asarray(columns, dtype=np.intp)
    rows = np.arange(a.value.shape[0])

    def vjp(g):
        out = np.zeros_like(a.value)
        out[rows, cols] = g
        return (out,)

    return a.tape._record("pick_columns", a.value[rows, cols], (a,), vjp)


def select(values: Node, keep_mask, defaults) -> Node:
    """where(keep_mask, values, defaults); gradients flow only into kept elements."""
    keep = np.asarray(keep_mask, dtype=bool)
    dflt = np.asarray(defaults, dtype=values.value.dtype)
    if keep.shape != values.value.shape or dflt.shape != values.value.shape:
        raise ShapeError(
            f"select: mask {keep.shape} / defaults {dflt.shape} vs values {values.value.shape}")
    return values.tape._record("select", np.where(keep, values.value, dflt), (values,),
                               lambda g: (np.where(keep, g, 0.0),))


def softmax_rows(a: Node) -> Node:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return a.tape._record("softmax", p, (a,), vjp)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer class labels (max-stabilized)."""
    y = np.asarray(labels, dtype=np.intp)
    n, k = logits.value.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match logits {logits.value.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min={y.min()}, max={y.max()}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), y]).mean()
    if _CHECK_FINITE and not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy loss")

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return logits.tape._record("softmax_xent", loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# affine transforms and bilinear warping

# component order of the range vector theta
AFFINE_ROT, AFFINE_TX, AFFINE_TY, AFFINE_SX, AFFINE_SY, AFFINE_SHEAR = range(6)


def affine_matrices(theta: Node, eps) -> Node:
    """2x3 matrices Translate . Rotate . Shear . Scale from ranges and noise.

    Per-draw parameters are p = theta * eps with eps in [-1, 1]^6; rotation is
    in radians, translations in image fractions (a fraction of 0.5 moves by
    half the image), scales act as (1 + p), shear is a single x-shear factor.
    Differentiable in theta for fixed eps.
    """
    e = np.asarray(eps, dtype=theta.value.dtype)
    if e.ndim == 1:
        e = e[None, :]
    if theta.value.shape != (6,) or e.shape[1:] != (6,):
        raise ShapeError(f"affine_matrices: theta {theta.value.shape}, eps {e.shape}")
    p = theta.value[None, :] * e
    c, s = np.cos(p[:, AFFINE_ROT]), np.sin(p[:, AFFINE_ROT])
    kx, ky = 1.0 + p[:, AFFINE_SX], 1.0 + p[:, AFFINE_SY]
    m = p[:, AFFINE_SHEAR]
    n = e.shape[0]
    mats = np.zeros((n, 2, 3), dtype=theta.value.dtype)
    mats[:, 0, 0] = c * kx
    mats[:, 0, 1] = (c * m - s) * ky
    mats[:, 0, 2] = 2.0 * p[:, AFFINE_TX]
    mats[:, 1, 0] = s * kx
    mats[:, 1, 1] = (s * m + c) * ky
    mats[:, 1, 2] = 2.0 * p[:, AFFINE_TY]

    def vjp(g):
        dp = np.zeros_like(p)
        dp[:, AFFINE_ROT] = (
            g[:, 0, 0] * (-s * kx) + g[:, 0, 1] * (-s * m - c) * ky
            + g[:, 1, 0] * (c * kx) + g[:, 1, 1] * (c * m - s) * ky)
        dp[:, AFFINE_TX] = 2.0 * g[:, 0, 2]
        dp[:, AFFINE_TY] = 2.0 * g[:, 1, 2]
        dp[:, AFFINE_SX] = g[:, 0, 0] * c + g[:, 1, 0] * s
        dp[:, AFFINE_SY] = g[:, 0, 1] * (c * m - s) + g[:, 1, 1] * (s * m + c)
        dp[:, AFFINE_SHEAR] = g[:, 0, 1] * (c * ky) + g[:, 1, 1] * (s * ky)
        return ((dp * e).sum(axis=0),)

    return theta.tape._record("affine_matrices", mats, (theta,), vjp)


def warp_kernel(images: np.ndarray, mats: np.ndarray):
    """Forward bilinear warp; returns (output, saved context for backward).

    Output pixel at normalized coordinate g samples the input at A @ [g, 1].
    Coordinates span [-1, 1] with corners aligned; out-of-bounds reads are 0.
    """
    imgs = images
    squeeze = False
    if imgs.ndim == 2:
        imgs = imgs[None]
        squeeze = True
    n, h, w = imgs.shape
    if mats.ndim == 2:
        mats = np.broadcast_to(mats, (n, 2, 3))
    gx = np.linspace(-1.0, 1.0, w)
    gy = np.linspace(-1.0, 1.0, h)
    gxx, gyy = np.meshgrid(gx, gy)
    xs = (mats[:, 0, 0, None, None] * gxx + mats[:, 0, 1, None, None] * gyy
          + mats[:, 0, 2, None, None])
    ys = (mats[:, 1, 0, None, None] * gxx + mats[:, 1, 1, None, None] * gyy
          + mats[:, 1, 2, None, None])
    # to pixel units
    px = (xs + 1.0) * (0.5 * (w - 1))
    py = (ys + 1.0) * (0.5 * (h - 1))
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    fx = px - x0
    fy = py - y0

    def fetch(yi, xi):
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xi_c = np.clip(xi, 0, w - 1)
        yi_c = np.clip(yi, 0, h - 1)
        vals = imgs[np.arange(n)[:, None, None], yi_c, xi_c]
        return np.where(inb, vals, 0.0), inb

    v00, m00 = fetch(y0, x0)
    v01, m01 = fetch(y0, x0 + 1)
    v10, m10 = fetch(y0 + 1, x0)
    v11, m11 = fetch(y0 + 1, x0 + 1)
    out = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
           + fy * ((1 - fx) * v10 + fx * v11))
    ctx = (imgs.shape, squeeze, gxx, gyy, x0, y0, fx, fy,
           (v00, v01, v10, v11), (m00, m01, m10, m11))
    return (out[0] if squeeze else out), ctx


def _warp_grad_mats(g, ctx, dtype):
    (n, h, w), squeeze, gxx, gyy, x0, y0, fx, fy, vals, _ = ctx
    if squeeze:
        g = g[None]
    v00, v01, v10, v11 = vals
    # d out / d sample coordinate, in pixel units, then back to normalized
    d_px = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_py = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    gx_n = g * d_px * (0.5 * (w - 1))
    gy_n = g * d_py * (0.5 * (h - 1))
    dmat = np.zeros((n, 2, 3), dtype=dtype)
    dmat[:, 0, 0] = (gx_n * gxx).sum(axis=(1, 2))
    dmat[:, 0, 1] = (gx_n * gyy).sum(axis=(1, 2))
    dmat[:, 0, 2] = gx_n.sum(axis=(1, 2))
    dmat[:, 1, 0] = (gy_n * gxx).sum(axis=(1, 2))
    dmat[:, 1, 1] = (gy_n * gyy).sum(axis=(1, 2))
    dmat[:, 1, 2] = gy_n.sum(axis=(1, 2))
    return dmat


def _warp_grad_images(g, ctx):
    (n, h, w), squeeze, _, _, x0, y0, fx, fy, _, masks = ctx
    if squeeze:
        g = g[None]
    m00, m01, m10, m11 = masks
    flat = np.zeros((n, h * w))
    rows = np.broadcast_to(np.arange(n)[:, None, None], x0.shape).reshape(n, -1)

    def scatter(yi, xi, weight, mask):
        idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).reshape(n, -1)
        contrib = np.where(mask, g * weight, 0.0).reshape(n, -1)
        np.add.at(flat, (rows, idx), contrib)

    scatter(y0, x0, (1 - fy) * (1 - fx), m00)
    scatter(y0, x0 + 1, (1 - fy) * fx, m01)
    scatter(y0 + 1, x0, fy * (1 - fx), m10)
    scatter(y0 + 1, x0 + 1, fy * fx, m11)
    out = flat.reshape(n, h, w)
    return out[0] if squeeze else out


def bilinear_warp(images: Node, mats: Node) -> Node:
    """Differentiable bilinear warp of (n, H, W) images by (n, 2, 3) matrices."""
    out, ctx = warp_kernel(images.value, mats.value)
    dtype = mats.value.dtype

    def vjp(g):
        gi = _warp_grad_images(g, ctx) if images.needs_grad else None
        gm = _warp_grad_mats(g, ctx, dtype) if mats.needs_grad else None
        if gm is not None and mats.value.ndim == 2:
            gm = gm.sum(axis=0)
        return (gi, gm)

    return images.tape._record("bilinear_warp", out, (images, mats), vjp)


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_check(f, point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, node) -> scalar Node`` must be a pure function of the leaf.
    Returns max_i |(f(x+h e_i) - f(x-h e_i)) / 2h - g_i| / (|g_i| + 1e-12).
    """
    point = np.asarray(point, dtype=_DTYPE)
    tape = Tape()
    x = tape.leaf(point)
    g = backward(f(tape, x))[x]

    def value_at(arr):
        t = Tape()
        return float(f(t, t.leaf(arr)).value)

    flat = point.ravel()
    gflat = g.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        up = value_at(bumped.reshape(point.shape))
        bumped[i] = flat[i] - step
        dn = value_at(bumped.reshape(point.shape))
        fd = (up - dn) / (2.0 * step)
        err = abs(fd - gflat[i]) / (abs(gflat[i]) + 1e-12)
        worst = max(worst, err)
    return worst
