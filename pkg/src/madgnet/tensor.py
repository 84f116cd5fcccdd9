"""Dense float64 tensors with reverse-mode automatic differentiation.

Feature maps are rank-4 ``(N, C, H, W)`` arrays. Every differentiable
operation records a :class:`Node` on its output holding the inputs and a
closure mapping the output gradient to input gradients. :func:`backward`
orders the recorded graph topologically (a :class:`Tape`) and sweeps it in
reverse.

Broadcasting is deliberately absent. The only mixed-shape products are
:func:`mul_channelwise` (``(N,C,H,W) x (N,C,1,1)``), :func:`mul_spatial`
(``(N,C,H,W) x (N,1,H,W)``) and :func:`scale` by a one-element tensor.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_AXES = ("N", "C", "H", "W")
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None
        self.retain_grad = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(np.full(shape, float(value)))
    return Tensor(value)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_node = Node(op, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# tape / backward


class Tape:
    """Topologically ordered list of tensors produced by recorded operations.

    Built from an output tensor; every entry's inputs appear before it.
    """

    def __init__(self, order: list[Tensor]):
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; graphs are deep enough to hit the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.tape_node is not None:
                for inp in reversed(t.tape_node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires grad.

    Intermediate tensors keep their gradient only when ``retain_grad`` is set.
    Calling twice without zeroing accumulates.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward() needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.tape_node
        if node is None or t.retain_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if node is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig


# ---------------------------------------------------------------------------
# shape helpers


def _need_rank4(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{what}: expected rank-4 (N,C,H,W) tensor, got shape {t.shape}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        if a.ndim == b.ndim == 4:
            bad = [ax for ax, x, y in zip(_AXES, a.shape, b.shape) if x != y]
            raise DimensionError(f"{what}: shape mismatch on axes {','.join(bad)}: {a.shape} vs {b.shape}")
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, s: float | Tensor) -> Tensor:
    """Multiply by a python scalar or by a differentiable one-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError(f"scale: factor must have one element, got shape {s.shape}")
        sv = float(s.data.reshape(()))
        xd = x.data
        return _record(
            xd * sv,
            (x, s),
            lambda g: (g * sv, np.full(s.shape, float(np.sum(g * xd)))),
            "scale",
        )
    sv = float(s)
    return _record(x.data * sv, (x,), lambda g: (g * sv,), "scale")


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """``a * x + b`` with constant ``a``, ``b``; ``affine(f, -1, 1)`` is ``1 - f``."""
    return _record(a * x.data + b, (x,), lambda g: (a * g,), "affine")


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_array(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the loss check downstream
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _record(out, (x,), lambda g: (g * sigmoid_array(z),), "softplus")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def mul_channelwise(x: Tensor, m: Tensor) -> Tensor:
    """Recalibrate ``x[N,C,H,W]`` by a per-channel vector ``m[N,C,1,1]``."""
    _need_rank4(x, "mul_channelwise")
    if m.shape != (x.shape[0], x.shape[1], 1, 1):
        raise DimensionError(f"mul_channelwise: attention must be {(x.shape[0], x.shape[1], 1, 1)}, got {m.shape}")
    xd, md = x.data, m.data
    return _record(
        xd * md,
        (x, m),
        lambda g: (g * md, np.sum(g * xd, axis=(2, 3), keepdims=True)),
        "mul_channelwise",
    )


def mul_spatial(x: Tensor, a: Tensor) -> Tensor:
    """Multiply ``x[N,C,H,W]`` by a single-channel map ``a[N,1,H,W]`` shared by all channels."""
    _need_rank4(x, "mul_spatial")
    n, _, h, w = x.shape
    if a.shape != (n, 1, h, w):
        raise DimensionError(f"mul_spatial: map must be {(n, 1, h, w)}, got {a.shape}")
    xd, ad = x.data, a.data
    return _record(
        xd * ad,
        (x, a),
        lambda g: (g * ad, np.sum(g * xd, axis=1, keepdims=True)),
        "mul_spatial",
    )


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(
        np.full((1, 1, 1, 1), float(np.sum(x.data))),
        (x,),
        lambda g: (np.full(shape, float(g.reshape(()))),),
        "sum_all",
    )


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over (C,H,W) for each batch element, giving ``(N,1,1,1)``."""
    _need_rank4(x, "sum_per_sample")
    shape = x.shape
    return _record(
        np.sum(x.data, axis=(1, 2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum_per_sample",
    )


def global_pool(x: Tensor, stat: str) -> Tensor:
    """Per-channel average, max or min over the spatial axes.

    Max/min gradients go to the first attaining element in row-major order.
    """
    _need_rank4(x, "global_pool")
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError(f"global_pool: empty spatial extent (H={h}, W={w})")
    flat = x.data.reshape(n, c, h * w)
    if stat == "avg":
        out = flat.mean(axis=2).reshape(n, c, 1, 1)
        inv = 1.0 / (h * w)
        return _record(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "avgpool")
    if stat not in ("max", "min"):
        raise ContractError(f"global_pool: unknown statistic {stat!r}")
    idx = flat.argmax(axis=2) if stat == "max" else flat.argmin(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def bw(g):
        gx = np.zeros((n, c, h * w))
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(n, c, h, w),)

    return _record(out, (x,), bw, stat + "pool")


# ---------------------------------------------------------------------------
# structural


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _need_rank4(a, "concat_channels")
    _need_rank4(b, "concat_channels")
    bad = [ax for i, ax in enumerate(_AXES) if i != 1 and a.shape[i] != b.shape[i]]
    if bad:
        raise DimensionError(f"concat_channels: mismatch on axes {','.join(bad)}: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _record(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _need_rank4(x, "slice_channels")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _record(x.data[:, start:stop].copy(), (x,), bw, "slice")


def spatial_project(x: Tensor, basis: np.ndarray) -> Tensor:
    """Inner products of every ``x[n,c]`` with each of ``K`` images ``basis[k]``.

    Returns ``(N, C, K, 1)``.
    """
    _need_rank4(x, "spatial_project")
    if basis.ndim != 3 or basis.shape[1:] != x.shape[2:]:
        raise DimensionError(f"spatial_project: basis {basis.shape} does not match feature map {x.shape}")
    n, c = x.shape[:2]
    k = basis.shape[0]
    out = np.tensordot(x.data, basis, axes=([2, 3], [1, 2])).reshape(n, c, k, 1)
    return _record(
        out,
        (x,),
        lambda g: (np.tensordot(g[..., 0], basis, axes=([2], [0])),),
        "dct",
    )


# ---------------------------------------------------------------------------
# linear / convolution


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b`` on ``(N, C_in, 1, 1)`` vectors."""
    _need_rank4(x, "linear")
    n, cin, h, w = x.shape
    if (h, w) != (1, 1):
        raise DimensionError(f"linear: expected (N,C,1,1) input, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != cin:
        raise DimensionError(f"linear: weight {weight.shape} incompatible with C_in={cin}")
    cout = weight.shape[0]
    xv = x.data.reshape(n, cin)
    out = xv @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"linear: bias {bias.shape} != ({cout},)")
        out = out + bias.data
        inputs = inputs + (bias,)
    wd = weight.data

    def bw(g):
        g2 = g.reshape(n, cout)
        grads = [(g2 @ wd).reshape(n, cin, 1, 1), g2.T @ xv]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record(out.reshape(n, cout, 1, 1), inputs, bw, "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation via im2col and a single matrix product."""
    _need_rank4(x, "conv2d input")
    _need_rank4(weight, "conv2d weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: weight expects C_in={wcin} but input has C={cin} (axis C)")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractError("conv2d: stride and dilation must be >= 1, padding >= 0")
    k = kh
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: empty output for input H={h}, W={w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            cols[:, i, j] = xt[:, :, r : r + hspan : stride, s : s + wspan : stride]
    cols2 = cols.reshape(cin * k * k, n * ho * wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = (w2 @ cols2).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(cin, k, k, n, ho, wo)
        gxp = np.zeros((cin, n) + xp_shape[2:])
        for i in range(k):
            for j in range(k):
                r, s = i * dilation, j * dilation
                gxp[:, :, r : r + hspan : stride, s : s + wspan : stride] += dcols[:, i, j]
        gx = gxp.transpose(1, 0, 2, 3)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling


def _target_size(shape, scale_factor, size) -> tuple[int, int]:
    h, w = shape[2], shape[3]
    if size is not None:
        th, tw = int(size[0]), int(size[1])
    elif scale_factor is not None:
        if scale_factor <= 0:
            raise DimensionError(f"resample: scale must be positive, got {scale_factor}")
        th, tw = int(round(h * scale_factor)), int(round(w * scale_factor))
    else:
        raise ContractError("resample: give either scale or size")
    if th < 1 or tw < 1:
        raise DimensionError(f"resample: non-positive target size ({th}, {tw})")
    return th, tw


def _linear_taps(n_in: int, n_out: int):
    """Half-pixel (align_corners=False) source taps and fractions along one axis."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    frac[i0 == i1] = 0.0
    return i0, i1, frac


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix of the half-pixel bilinear map along one axis."""
    i0, i1, t = _linear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _lerp_axis(a: np.ndarray, axis: int, i0, i1, t) -> np.ndarray:
    a0 = np.take(a, i0, axis=axis)
    a1 = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = -1
    # a0 + t*(a1-a0) keeps constants bit-exact
    return a0 + t.reshape(shape) * (a1 - a0)


def resample_bilinear(x: Tensor, scale_factor: float | None = None, size=None) -> Tensor:
    """Bilinear resize with half-pixel centres; output ``round(H*scale)``."""
    _need_rank4(x, "resample_bilinear")
    h, w = x.shape[2:]
    th, tw = _target_size(x.shape, scale_factor, size)
    if (th, tw) == (h, w):
        return x
    rh = _linear_taps(h, th)
    rw = _linear_taps(w, tw)
    out = _lerp_axis(_lerp_axis(x.data, 2, *rh), 3, *rw)
    mh = interp_matrix(h, th)
    mw = interp_matrix(w, tw)

    def bw(g):
        # adjoint of the separable map: Mh^T g Mw
        gh = np.einsum("ij,ncjw->nciw", mh.T, g, optimize=True)
        return (np.einsum("nchj,jw->nchw", gh, mw, optimize=True),)

    return _record(out, (x,), bw, "bilinear")


def resample_nearest(x: Tensor, scale_factor: float | None = None, size=None) -> Tensor:
    """Nearest-neighbour resize (source index ``floor(dst * in / out)``)."""
    _need_rank4(x, "resample_nearest")
    h, w = x.shape[2:]
    th, tw = _target_size(x.shape, scale_factor, size)
    if (th, tw) == (h, w):
        return x
    ih = np.minimum((np.arange(th) * h) // th, h - 1)
    iw = np.minimum((np.arange(tw) * w) // tw, w - 1)
    out = x.data[:, :, ih][:, :, :, iw]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, (slice(None), slice(None), ih[:, None], iw[None, :]), g)
        return (gx,)

    return _record(out, (x,), bw, "nearest")


def resample(x: Tensor, mode: str = "bilinear", scale_factor: float | None = None, size=None) -> Tensor:
    if mode == "bilinear":
        return resample_bilinear(x, scale_factor, size)
    if mode == "nearest":
        return resample_nearest(x, scale_factor, size)
    raise ContractError(f"unknown resampling mode {mode!r}")
