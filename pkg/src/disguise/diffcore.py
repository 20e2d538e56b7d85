"""Small reverse-mode differentiation engine over numpy arrays.

Only the primitives needed by the reconstruction, disguise and detection
losses are provided. Values are evaluated in float64; tensors that leave the
process (files, weights, disguises) are stored as float32.

Images and latents use channel-last layout: ``(H, W, C)`` or ``(N, H, W, C)``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Node",
    "const",
    "leaf",
    "backward",
    "grad_of",
    "finite_difference_grad",
    "conv2d",
    "upsample2",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "add_scalar",
    "tanh",
    "sigmoid",
    "abs_",
    "square",
    "sqrt_eps",
    "spow",
    "mean",
    "sum_",
    "gaussian_blur",
    "gaussian_kernel1d",
    "downsample_avg2",
    "hflip",
    "clamp01",
    "spatial_mean",
    "item",
    "SQRT_EPS",
    "primitive_forward",
    "PRIMITIVE_KINDS",
]

DTYPE = np.float64
SQRT_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible dimensions."""


class ContractError(ValueError):
    """Raised when a documented precondition does not hold."""


class Node:
    """A value in a differentiable graph.

    ``vjp`` maps the gradient of this node to a tuple with one gradient per
    parent (``None`` for parents that do not need one).
    """

    __slots__ = ("kind", "value", "parents", "vjp", "requires_grad", "grad")

    def __init__(self, kind, value, parents=(), vjp=None, requires_grad=False):
        self.kind = kind
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.kind}, shape={self.value.shape})"


def const(x, dtype=DTYPE) -> Node:
    if isinstance(x, Node):
        return x
    return Node("const", np.asarray(x, dtype=dtype))


def leaf(x, dtype=DTYPE) -> Node:
    """A node whose gradient is wanted."""
    return Node("leaf", np.array(x, dtype=dtype), requires_grad=True)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(kind, value, parents, vjp) -> Node:
    req = any(p.requires_grad for p in parents)
    return Node(kind, value, parents, vjp if req else None, req)


def _check_same(kind: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: dims {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_same("add", a, b)
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_same("sub", a, b)
    return _make("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_same("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def scalar_mul(a, c: float) -> Node:
    a = _wrap(a)
    c = float(c)
    return _make("scalar_mul", a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Node:
    a = _wrap(a)
    return _make("add_scalar", a.value + float(c), (a,), lambda g: (g,))


def tanh(a) -> Node:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = _wrap(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def square(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt_eps(a) -> Node:
    """sqrt(x + 1e-12), finite gradient at zero."""
    a = _wrap(a)
    out = np.sqrt(a.value + SQRT_EPS)
    return _make("sqrt_eps", out, (a,), lambda g: (0.5 * g / out,))


def spow(a, p: float) -> Node:
    """Sign-preserving power ``sign(x) * |x|**p``."""
    a = _wrap(a)
    p = float(p)
    av = a.value
    mag = np.maximum(np.abs(av), 1e-12)
    out = np.sign(av) * mag**p

    def vjp(g):
        return (g * p * mag ** (p - 1.0),)

    return _make("spow", out, (a,), vjp)


def clamp01(a) -> Node:
    a = _wrap(a)
    av = a.value
    inside = (av > 0.0) & (av < 1.0)
    return _make("clamp01", np.clip(av, 0.0, 1.0), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions


def mean(a) -> Node:
    a = _wrap(a)
    shape, n = a.shape, a.value.size
    out = np.reshape(np.sum(a.value, dtype=np.float64) / n, (1,))
    return _make("mean_reduce", out, (a,), lambda g: (np.full(shape, g[0] / n, dtype=a.value.dtype),))


def sum_(a) -> Node:
    a = _wrap(a)
    shape = a.shape
    out = np.reshape(np.sum(a.value, dtype=np.float64), (1,))
    return _make("sum_reduce", out, (a,), lambda g: (np.full(shape, g[0], dtype=a.value.dtype),))


def spatial_mean(a) -> Node:
    """Mean over height and width; ``(H, W, C) -> (C,)``, ``(N, H, W, C) -> (N, C)``."""
    a = _wrap(a)
    hx, wx = _spatial_axes(a.value, "spatial_mean")
    shape = a.shape
    n = shape[hx] * shape[wx]
    out = np.sum(a.value, axis=(hx, wx), dtype=np.float64) / n

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, (hx, wx)), shape).astype(a.value.dtype),)

    return _make("spatial_mean", out, (a,), vjp)


def item(node: Node) -> float:
    return float(node.value.reshape(-1)[0])


# -------------------------------------------------------------------- spatial


def hflip(a) -> Node:
    """Reverse the width axis."""
    a = _wrap(a)
    if a.value.ndim < 3:
        raise ShapeError(f"hflip: expected (H, W, C) or (N, H, W, C), got dims {a.shape}")
    ax = a.value.ndim - 2
    return _make("hflip", np.flip(a.value, axis=ax).copy(), (a,),
                 lambda g: (np.flip(g, axis=ax).copy(),))


def _spatial_axes(x: np.ndarray, kind: str) -> tuple[int, int]:
    if x.ndim not in (3, 4):
        raise ShapeError(f"{kind}: expected rank 3 or 4, got dims {x.shape}")
    return x.ndim - 3, x.ndim - 2


def upsample2(a) -> Node:
    """Nearest-neighbour 2x upsampling."""
    a = _wrap(a)
    hx, wx = _spatial_axes(a.value, "nearest_upsample")
    out = np.repeat(np.repeat(a.value, 2, axis=hx), 2, axis=wx)

    def vjp(g):
        s = list(g.shape)
        s[hx: wx + 1] = [s[hx] // 2, 2, s[wx] // 2, 2]
        return (g.reshape(s).sum(axis=(hx + 1, hx + 3)),)

    return _make("nearest_upsample", out, (a,), vjp)


def downsample_avg2(a) -> Node:
    """2x2 average pooling; an odd trailing row/column is dropped."""
    a = _wrap(a)
    x = a.value
    hx, wx = _spatial_axes(x, "downsample_avg2")
    h, w = x.shape[hx], x.shape[wx]
    if h < 2 or w < 2:
        raise ShapeError(f"downsample_avg2: dims {x.shape} too small")
    h2, w2 = h // 2, w // 2
    xs = x[..., : 2 * h2, : 2 * w2, :]
    s = list(xs.shape)
    s[hx: wx + 1] = [h2, 2, w2, 2]
    out = xs.reshape(s).mean(axis=(hx + 1, hx + 3))
    in_shape = x.shape

    def vjp(g):
        gi = np.zeros(in_shape, dtype=x.dtype)
        up = np.repeat(np.repeat(g, 2, axis=hx), 2, axis=wx) * 0.25
        gi[..., : 2 * h2, : 2 * w2, :] = up
        return (gi,)

    return _make("downsample_avg2", out, (a,), vjp)


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    k = np.exp(-(coords**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_matrix(n: int, kernel: np.ndarray, mode: str) -> np.ndarray:
    k = len(kernel)
    if mode == "valid":
        if n < k:
            raise ShapeError(f"gaussian_blur: side {n} smaller than window {k}")
        m = np.zeros((n - k + 1, n))
        for i in range(n - k + 1):
            m[i, i: i + k] = kernel
        return m
    if mode == "same":
        # symmetric (half-sample) reflection at the borders
        m = np.zeros((n, n))
        r = k // 2
        for i in range(n):
            for t in range(k):
                j = i + t - r
                while j < 0 or j >= n:
                    j = -j - 1 if j < 0 else 2 * n - j - 1
                m[i, j] += kernel[t]
        return m
    raise ContractError(f"gaussian_blur: unknown mode {mode!r}")


_MATRIX_CACHE: dict = {}


def _cached_matrix(n: int, kernel: np.ndarray, mode: str, dtype) -> np.ndarray:
    key = (n, kernel.tobytes(), mode, np.dtype(dtype).str)
    m = _MATRIX_CACHE.get(key)
    if m is None:
        m = _filter_matrix(n, kernel, mode).astype(dtype)
        _MATRIX_CACHE[key] = m
    return m


def gaussian_blur(a, kernel: np.ndarray, mode: str = "valid") -> Node:
    """Separable blur along height and width with a fixed 1-D kernel."""
    a = _wrap(a)
    x = a.value
    hx, wx = _spatial_axes(x, "gaussian_blur")
    mh = _cached_matrix(x.shape[hx], kernel, mode, x.dtype)
    mw = _cached_matrix(x.shape[wx], kernel, mode, x.dtype)
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    oh, ow = mh.shape[0], mw.shape[0]
    # height pass on (..., H, W*C), then width pass with (W, C) as the matrix dims
    t = (mh @ x.reshape(*lead, h, w * c)).reshape(*lead, oh, w, c)
    out = mw @ t

    def vjp(g):
        gt = (mw.T @ g).reshape(*lead, oh, w * c)
        return ((mh.T @ gt).reshape(*lead, h, w, c),)

    return _make("gaussian_blur", out, (a,), vjp)


def conv2d(x, kernel, bias=None, stride: int = 1) -> Node:
    """'Same' convolution with zero padding ``k // 2`` and stride 1 or 2.

    ``x``: (H, W, Cin) or (N, H, W, Cin); ``kernel``: (kh, kw, Cin, Cout);
    ``bias``: (Cout,).
    """
    x, kernel = _wrap(x), _wrap(kernel)
    parents = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        parents.append(bias)
    xv, kv = x.value, kernel.value
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} not supported")
    if kv.ndim != 4 or xv.ndim not in (3, 4) or xv.shape[-1] != kv.shape[2]:
        raise ShapeError(f"conv2d: input dims {xv.shape} incompatible with kernel dims {kv.shape}")
    if bias is not None and bias.shape != (kv.shape[3],):
        raise ShapeError(f"conv2d: bias dims {bias.shape} do not match kernel dims {kv.shape}")
    batched = xv.ndim == 4
    xb = xv if batched else xv[None]
    n, h, w, cin = xb.shape
    kh, kw, _, cout = kv.shape
    ph, pw = kh // 2, kw // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    def window(arr, i, j):
        return arr[:, i: i + stride * ho: stride, j: j + stride * wo: stride, :]

    out = None
    for i in range(kh):
        for j in range(kw):
            term = window(xp, i, j) @ kv[i, j]
            out = term if out is None else out + term
    if bias is not None:
        out = out + bias.value
    if not batched:
        out = out[0]
    need_x, need_k = x.requires_grad, kernel.requires_grad
    need_b = bias is not None and bias.requires_grad

    def vjp(g):
        gb = (g if batched else g[None]).astype(out.dtype, copy=False)
        gx = gk = gbias = None
        if need_k:
            g2 = gb.reshape(-1, cout)
            gk = np.empty(kv.shape, dtype=np.result_type(xp, gb))
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = window(xp, i, j).reshape(-1, cin).T @ g2
        if need_b:
            gbias = gb.sum(axis=(0, 1, 2))
        if need_x:
            gxp = np.zeros(xp.shape, dtype=np.result_type(xp, gb))
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += gb @ kv[i, j].T
            gx = gxp[:, ph: ph + h, pw: pw + w, :]
            if not batched:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gbias)

    return _make("conv2d", out, parents, vjp)


_PRIMITIVES: dict[str, Callable] = {
    "conv2d": lambda xs, at: conv2d(*xs, stride=at.get("stride", 1)),
    "nearest_upsample2": lambda xs, at: upsample2(*xs),
    "add": lambda xs, at: add(*xs),
    "sub": lambda xs, at: sub(*xs),
    "mul": lambda xs, at: mul(*xs),
    "div": lambda xs, at: div(*xs),
    "scalar_mul": lambda xs, at: scalar_mul(*xs, at["c"]),
    "add_scalar": lambda xs, at: add_scalar(*xs, at["c"]),
    "tanh": lambda xs, at: tanh(*xs),
    "sigmoid": lambda xs, at: sigmoid(*xs),
    "abs": lambda xs, at: abs_(*xs),
    "square": lambda xs, at: square(*xs),
    "sqrt_eps": lambda xs, at: sqrt_eps(*xs),
    "spow": lambda xs, at: spow(*xs, at["p"]),
    "mean_reduce": lambda xs, at: mean(*xs),
    "sum_reduce": lambda xs, at: sum_(*xs),
    "spatial_mean": lambda xs, at: spatial_mean(*xs),
    "gaussian_blur": lambda xs, at: gaussian_blur(*xs, at["kernel"], at.get("mode", "valid")),
    "downsample_avg2": lambda xs, at: downsample_avg2(*xs),
    "hflip": lambda xs, at: hflip(*xs),
    "clamp01": lambda xs, at: clamp01(*xs),
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def primitive_forward(kind: str, inputs: Sequence, attrs: dict | None = None) -> np.ndarray:
    """Evaluate one primitive on plain arrays, outside any graph."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ContractError(f"unknown primitive {kind!r}")
    return fn([const(x) for x in inputs], attrs or {}).value


# ------------------------------------------------------------------- backward


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every leaf.

    Returns a mapping from ``id(leaf)`` to its gradient.
    """
    if root.value.size != 1:
        raise ContractError(f"backward: root must be scalar, got dims {root.shape}")
    order = _topo(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad_of(f: Callable[[Node], Node], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``x`` and return ``(value, df/dx)``."""
    xl = leaf(x)
    out = f(xl)
    backward(out)
    g = xl.grad if xl.grad is not None else np.zeros_like(xl.value)
    return float(out.value.reshape(-1)[0]), g


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3,
                           indices: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function, in float64.

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries are left at zero.
    """
    if h <= 0:
        raise ContractError("finite_difference_grad: step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx: Sequence[int] = range(flat.size) if indices is None else list(indices)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
