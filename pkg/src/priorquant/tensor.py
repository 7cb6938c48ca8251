"""Dense arrays with reverse-mode differentiation.

Values are numpy arrays in row-major, channel-first layout ([C, H, W] or
[N, C, H, W]). Every op records a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the graph in reverse topological
order.

Gradient accumulation rule: leaf tensors accumulate into ``.grad`` across
backward passes until :meth:`Tensor.zero_grad` is called. A graph is consumed
by its backward pass; calling :func:`backward` twice on the same loss raises
``RuntimeError``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and dtype is None:
        return data
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar for ``b`` gives scalar-mul."""
    a = _lift(a)
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same value, no path back to ``x``."""
    return x.detach()


# ----------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather ``table[indices]`` along axis 0; gradient scatter-adds."""
    idx = np.asarray(indices)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.data[idx], (table,), bw)


# ------------------------------------------------------------- image resampling


def downsample_area(x: Tensor) -> Tensor:
    """Average non-overlapping 2x2 blocks of the last two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_area needs even spatial dims, got {(h, w)}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = blocks.mean(axis=(-3, -1)).astype(x.dtype)

    def bw(g):
        g4 = np.broadcast_to(g[..., :, None, :, None] * x.dtype.type(0.25), blocks.shape)
        return (g4.reshape(x.shape),)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        return (g.reshape(*x.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c // (r * r), r, r, h, w)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return a.reshape(*lead, c // (r * r), h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c, h // r, r, w // r, r)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return a.reshape(*lead, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[..., C*r*r, H, W] -> [..., C, r*H, r*W] with out(c, r*h+dy, r*w+dx) = in(c*r*r + dy*r + dx, h, w)."""
    if r < 1 or x.shape[-3] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[-3]} channels not divisible by r^2={r * r}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(h, w)} not divisible by r={r}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


# -------------------------------------------------------------- convolution


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Replicate-pad [N, C, H, W] and gather windows as [N, C, kh, kw, Ho, Wo]."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    if kh == kw == 1:
        return x[:, :, None, None, ::stride, ::stride]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _fold_replicate(gcols: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: [N, C, kh, kw, Ho, Wo] -> [N, C, H, W]."""
    n, c, kh, kw, ho, wo = gcols.shape
    ph, pw = kh // 2, kw // 2
    if kh == kw == 1 and stride == 1:
        return gcols[:, :, 0, 0]
    gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    if ph:
        gp[:, :, ph] += gp[:, :, :ph].sum(axis=2)
        gp[:, :, ph + h - 1] += gp[:, :, ph + h :].sum(axis=2)
    if pw:
        gp[:, :, :, pw] += gp[:, :, :, :pw].sum(axis=3)
        gp[:, :, :, pw + w - 1] += gp[:, :, :, pw + w :].sum(axis=3)
    return gp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with replicate padding (no kernel flip).

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; ``weight`` is [C_out, C_in, kh, kw]
    with odd kh, kw. Output spatial size is ceil(H / stride).
    """
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {weight.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {(kh, kw)}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    cols = im2col(xd, kh, kw, stride)
    ho, wo = cols.shape[-2:]
    cols2 = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    if not batched:
        out = out[0]

    def bw(g):
        g3 = (g if batched else g[None]).reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, cin, kh, kw, ho, wo)
            gx = _fold_replicate(gcols, h, w, stride)
            if not batched:
                gx = gx[0]
        if weight.requires_grad:
            gw = (g3 @ cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------- FFT


def fft2(x: Tensor) -> Tensor:
    """Unnormalized forward DFT over the last two axes of a real tensor.

    Returns real/imaginary parts stacked on a new axis -3: [..., H, W] -> [..., 2, H, W].
    """
    h, w = x.shape[-2:]
    spec = np.fft.fft2(x.data)
    out = np.stack([spec.real, spec.imag], axis=-3).astype(x.dtype)

    def bw(g):
        gc = g[..., 0, :, :] + 1j * g[..., 1, :, :]
        return ((np.fft.ifft2(gc) * (h * w)).real.astype(x.dtype),)

    return _make(out, (x,), bw)


def ifft2(x: Tensor) -> Tensor:
    """Inverse DFT (1/(H*W) normalized) of a [..., 2, H, W] complex tensor."""
    if x.data.ndim < 3 or x.shape[-3] != 2:
        raise ShapeError(f"ifft2 expects [..., 2, H, W], got {x.shape}")
    h, w = x.shape[-2:]
    spec = np.fft.ifft2(x.data[..., 0, :, :] + 1j * x.data[..., 1, :, :])
    out = np.stack([spec.real, spec.imag], axis=-3).astype(x.dtype)

    def bw(g):
        gc = np.fft.fft2(g[..., 0, :, :] + 1j * g[..., 1, :, :]) / (h * w)
        return (np.stack([gc.real, gc.imag], axis=-3).astype(x.dtype),)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``; returns {leaf: grad} for leaves requiring grad."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents, node._backward = (), None
        node._consumed = True
    loss._consumed = True
    return leaves


# ------------------------------------------------------------ gradient check


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max norm-wise relative error between autograd and central differences.

    A non-scalar output of ``fn`` is projected onto fixed random weights; the
    projection for the numeric side is accumulated in float64 so 32-bit runs
    are limited by per-element rounding only. With ``max_entries`` a random
    subset of each input's entries is perturbed.
    """
    if eps is None:
        eps = 1e-6 if inputs[0].dtype == np.float64 else 1e-3
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar(out: Tensor) -> float:
        v = out.data.astype(np.float64)
        return float(v.sum() if weights is None else (v * weights).sum())

    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = fn(*inputs)
    if weights is not None:
        out = tsum(mul(out, Tensor(weights.astype(out.dtype))))
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(fn(*inputs))
            flat[i] = orig - eps
            fm = scalar(fn(*inputs))
            flat[i] = orig
            num[n] = (fp - fm) / (2 * eps)
        ana = ga.reshape(-1)[idx].astype(np.float64)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
