"""A small reverse-mode differentiation substrate.

Only the layers the detector needs are provided. Activations are laid out as
``(channels, time, space)`` with the spatial ``h x w`` grid flattened, which
lets every temporal layer be written as a plain matrix product.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Sequence

import numpy as np

from . import roipool

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        backward([(self, grad)])


def _topo(roots: Iterable[Tensor]) -> list[Tensor]:
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents)
    return order


def backward(seeds: Sequence[tuple[Tensor, np.ndarray]]) -> None:
    """Backpropagate several output gradients through their shared graph at once.

    Gradients of intermediate tensors are released after use; leaves keep
    theirs until :meth:`Tensor.zero_grad`.
    """
    for t, g in seeds:
        if g.shape != t.shape:
            raise ValueError(f"seed gradient {g.shape} does not match tensor {t.shape}")
        t.accumulate(np.asarray(g))
    for node in reversed(_topo(t for t, _ in seeds)):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None


def _op(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable[[np.ndarray], None]) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    out = Tensor(data, parents=parents)
    if out.requires_grad:
        out._backward = fn
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    return _op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), fn)


def conv_time(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Temporal convolution, zero padded to keep the length.

    ``x`` is ``(C_in, L, S)``, ``w`` is ``(C_out, C_in, k)`` with odd ``k``,
    ``b`` is ``(C_out,)``. The same kernel is applied at every spatial position.
    """
    cin, length, s = x.shape
    cout, _, k = w.shape
    pad = dilation * (k // 2)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.stack([xp[:, i * dilation:i * dilation + length] for i in range(k)], axis=1)
    cols = cols.reshape(cin * k, length * s)
    w2 = w.data.reshape(cout, cin * k)
    out = (w2 @ cols + b.data[:, None]).reshape(cout, length, s)

    def fn(g):
        g2 = g.reshape(cout, length * s)
        if w.requires_grad:
            w.accumulate((g2 @ cols.T).reshape(w.shape))
        if b.requires_grad:
            b.accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, k, length, s)
            dxp = np.zeros_like(xp)
            for i in range(k):
                dxp[:, i * dilation:i * dilation + length] += dcols[:, i]
            x.accumulate(dxp[:, pad:pad + length])

    return _op(out, (x, w, b), fn)


def maxpool_time(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping temporal max pooling; ties resolve to the earliest step."""
    c, length, s = x.shape
    if length % factor:
        raise ValueError(f"temporal length {length} not divisible by pool factor {factor}")
    if factor == 1:
        return x
    xr = x.data.reshape(c, length // factor, factor, s)
    idx = xr.argmax(axis=2)[:, :, None, :]
    out = np.take_along_axis(xr, idx, axis=2)[:, :, 0, :]

    def fn(g):
        dx = np.zeros_like(xr)
        np.put_along_axis(dx, idx, g[:, :, None, :], axis=2)
        x.accumulate(dx.reshape(x.shape))

    return _op(out, (x,), fn)


def max_spatial(x: Tensor) -> Tensor:
    """Collapse the flattened spatial axis by max: ``(C, L, S) -> (C, L)``."""
    idx = x.data.argmax(axis=2)[..., None]
    out = np.take_along_axis(x.data, idx, axis=2)[..., 0]

    def fn(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g[..., None], axis=2)
        x.accumulate(dx)

    return _op(out, (x,), fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``x`` of shape ``(N, D_in)`` and ``w`` of shape ``(D_in, D_out)``."""
    out = x.data @ w.data + b.data

    def fn(g):
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ w.data.T)

    return _op(out, (x, w, b), fn)


def transpose(x: Tensor) -> Tensor:
    def fn(g):
        x.accumulate(g.T)

    return _op(x.data.T, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    def fn(g):
        x.accumulate(g.reshape(x.shape))

    return _op(x.data.reshape(shape), (x,), fn)


def roi_pool(
    x: Tensor,
    spatial: tuple[int, int],
    segments: np.ndarray,
    grid: roipool.PoolGrid,
    stride: int,
) -> Tensor:
    """Pool each segment from ``x`` (``(C, l, h*w)``) into a flat ``(N, C*ls*hs*ws)`` matrix."""
    c, l, _ = x.shape
    h, w = spatial
    vol = roipool.FeatureVolume(x.data.reshape(c, l, h, w), stride)
    records = roipool.roi_pool_many(vol, segments, grid)
    n = len(records)
    out = np.stack([r.output for r in records]).reshape(n, -1) if n else np.zeros((0, c * grid.cells), x.data.dtype)

    def fn(g):
        if not n:
            return
        arg = np.stack([r.argmax for r in records]).reshape(n, c, -1)
        rows = np.broadcast_to(np.arange(c)[None, :, None], arg.shape)
        dx = np.zeros((c, l * h * w), dtype=x.data.dtype)
        np.add.at(dx, (rows.ravel(), arg.ravel()), g.reshape(n, c, -1).ravel())
        x.accumulate(dx.reshape(x.shape))

    return _op(out, (x,), fn)
