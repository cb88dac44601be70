"""Dense NCHW tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` sorts
the graph reachable from a scalar loss and runs those closures in exact
reverse topological order, summing contributions for tensors with several
consumers.

Arrays are float32 by default.  Ops compute in the dtype numpy promotes their
inputs to, which lets the gradient checker run the same graph in float64
by promoting only the parameters.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Raised for invalid differentiation requests."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "kink",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        # digest of discrete branch decisions (relu masks, pool argmax)
        self.kink: bytes | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(loss: Tensor) -> list[Tensor]:
    """Return the differentiable nodes reachable from ``loss``, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``."""
    if loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.op is None or not loss.requires_grad:
        raise GraphError("loss has no differentiation graph; run a forward pass "
                         "over parameters that require grad first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def kink_signature(loss: Tensor) -> bytes:
    """Digest of all discrete branch decisions in the graph feeding ``loss``."""
    h = hashlib.sha1()
    for node in topological_order(loss):
        if node.kink is not None:
            h.update(node.kink)
    return h.digest()


# ---------------------------------------------------------------------------
# convolution


def same_padding(kernel: int) -> int:
    if kernel % 2 == 0:
        raise ShapeError(f"same padding needs an odd kernel, got {kernel}")
    return (kernel - 1) // 2


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        v = v[:, :, ::stride, ::stride]
    return v


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got rank {x.data.ndim}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ShapeError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    if cin_g * groups != cin:
        raise ShapeError(f"weight in-channels {cin_g} x groups {groups} != input channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias length {bias.shape} != output channels {cout}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    G, cog = groups, cout // groups
    xd, wd = x.data, weight.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if pointwise:
        # (N, G, Cg, H, W)
        cols = xd.reshape(n, G, cin_g, h * w)
        wg = wd.reshape(G, cog, cin_g)
        out = np.matmul(wg, cols)  # N, G, cog, HW
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = _windows(xp, kh, kw, stride)  # N, C, Ho, Wo, kh, kw
        # cols: (G, N*Ho*Wo, Cg*kh*kw)
        cols = win.reshape(n, G, cin_g, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
        cols = np.ascontiguousarray(cols).reshape(G, n * ho * wo, cin_g * kh * kw)
        wg = wd.reshape(G, cog, cin_g * kh * kw)
        out = np.matmul(cols, wg.transpose(0, 2, 1))  # G, NHW, cog
        out = out.reshape(G, n, ho, wo, cog).transpose(1, 0, 4, 2, 3)
    out = np.ascontiguousarray(out.reshape(n, cout, ho, wo))
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if pointwise:
            gg = g.reshape(n, G, cog, h * w)
            if weight.requires_grad:
                gw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                gx = np.matmul(wg.transpose(0, 2, 1), gg).reshape(xd.shape)
        else:
            gm = g.reshape(n, G, cog, ho, wo).transpose(1, 0, 3, 4, 2).reshape(G, n * ho * wo, cog)
            if weight.requires_grad:
                gw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(wd.shape)
            if x.requires_grad:
                dcols = np.matmul(gm, wg)  # G, NHW, Cg*kh*kw
                dcols = dcols.reshape(G, n, ho, wo, cin_g, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
                dcols = dcols.reshape(n, cin, ho, wo, kh, kw)
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
                he = stride * (ho - 1) + 1
                we = stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[..., i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, _backward, "conv2d")


# ---------------------------------------------------------------------------
# pointwise and shape ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _node(x.data * mask, (x,),
                lambda g: (g * mask,), "relu")
    out.kink = hashlib.sha1(np.packbits(mask).tobytes()).digest()
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        axis = next((i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q), None)
        where = f"axis {axis}" if axis is not None else "rank"
        raise ShapeError(f"add needs identical shapes, {a.shape} vs {b.shape} differ at {where}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along the channel axis, preserving order."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != 4 or len(ref) != 4:
            raise ShapeError("concat expects NCHW tensors")
        for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(f"concat {name} axis mismatch: {t.shape[axis]} vs {ref[axis]}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return _node(out, tensors, _backward, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {c} channels")

    def _backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _node(np.ascontiguousarray(x.data[:, start:stop]), (x,), _backward, "slice")


def split_channels(x: Tensor, first: int) -> tuple[Tensor, Tensor]:
    return channel_slice(x, 0, first), channel_slice(x, first, x.shape[1])


def max_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"max_pool2x2 needs even height, got {h}")
    if w % 2:
        raise ShapeError(f"max_pool2x2 needs even width, got {w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max in scan order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    node = _node(np.ascontiguousarray(out), (x,), _backward, "max_pool2x2")
    node.kink = hashlib.sha1(idx.astype(np.uint8).tobytes()).digest()
    return node


def tsum(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(dtype=x.data.dtype)), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def add_scalars(values: Iterable[Tensor]) -> Tensor:
    vals = list(values)
    if not vals:
        raise ShapeError("add_scalars needs at least one value")
    for v in vals:
        if v.data.ndim != 0:
            raise ShapeError(f"add_scalars expects scalars, got shape {v.shape}")
    total = vals[0].data
    for v in vals[1:]:
        total = total + v.data
    return _node(np.asarray(total), vals, lambda g: [g] * len(vals), "add_scalars")


def sse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Sum over every element of (pred - target)**2."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"sse_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t.astype(pred.data.dtype, copy=False)
    out = np.asarray(np.sum(diff * diff, dtype=diff.dtype))
    return _node(out, (pred,), lambda g: (2.0 * g * diff,), "sse_loss")


# ---------------------------------------------------------------------------
# non-differentiable utilities


def bilinear_sample(x: np.ndarray, out_h: int, out_w: int,
                    scale_y: float, scale_x: float) -> np.ndarray:
    """Sample ``x[..., H, W]`` at source coords ``(i*scale_y, j*scale_x)``.

    Coordinates beyond the last row/column clamp to the edge.
    """
    h, w = x.shape[-2:]
    ys = np.clip(np.arange(out_h) * scale_y, 0, h - 1)
    xs = np.clip(np.arange(out_w) * scale_x, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(x.dtype)[:, None]
    wx = (xs - x0).astype(x.dtype)[None, :]
    top = x[..., y0, :][..., :, x0] * (1 - wx) + x[..., y0, :][..., :, x1] * wx
    bot = x[..., y1, :][..., :, x0] * (1 - wx) + x[..., y1, :][..., :, x1] * wx
    return top * (1 - wy) + bot * wy


def bilinear_resize(x: np.ndarray | Tensor, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes; pixel i maps to source i*in/out."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = arr.shape[-2:]
    return bilinear_sample(arr, out_h, out_w, h / out_h, w / out_w)
