"""Dense float64 tensors with a reverse-mode tape.

Every operation produces a new :class:`Tensor`; when gradient recording is
enabled and at least one input requires a gradient, the result keeps a
reference to its parents together with a closure that maps the upstream
gradient onto each parent.  :func:`backward` walks that DAG once in reverse
topological order.

Arrays carry an optional leading batch axis wherever a layer needs one, so the
per-sample shape rules below are documented without it.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NumericalError(FloatingPointError):
    """Raised when an op produces NaN or Inf.

    The ``op`` attribute names the first op whose output was non-finite.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite values produced by op '{op}'{': ' + detail if detail else ''}")


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed by :func:`backward`."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None

    # -- convenience -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Python operators map onto the primitive ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _const(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _const(-1.0)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(v: float) -> Tensor:
    return Tensor(np.array(v))


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericalError(op, f"output shape {out.shape}")
    t = Tensor(out)
    t._op = op
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum over axes that numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise / linear algebra
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for bias vectors)."""
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", ad * bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape [..., n, k] and a 2-D b of shape [k, j]."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope)

    def bw(g):
        return (g * scale,)

    return _record("leaky_relu", x * scale, (a,), bw)


def square(a: Tensor) -> Tensor:
    x = a.data

    def bw(g):
        return (2.0 * g * x,)

    return _record("square", x * x, (a,), bw)


# ----------------------------------------------------------------------------
# structural ops
# ----------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shaped tensors along a new axis (reshape + concat)."""
    expanded = []
    for t in tensors:
        shp = list(t.shape)
        shp.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shp)))
    return concat(expanded, axis=axis)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; the result is a copy."""
    out = np.array(a.data[index], dtype=np.float64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _record("slice", out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (a,), bw)


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _record("mean", np.asarray(a.data.mean(axis=axis)), (a,), bw)


# ----------------------------------------------------------------------------
# convolution and pooling
# ----------------------------------------------------------------------------


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding that keeps the spatial size for kernel k."""
    total = k - 1
    return total // 2, total - total // 2


def _correlate_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 cross-correlation.

    x: [B, h, w, cin], w: [f, kh, kw, cin] -> ([B, h, w, f], im2col patches)
    """
    b, h, wd, cin = x.shape
    f, kh, kw, _ = w.shape
    pt, pb = same_padding(kh)
    pl, pr = same_padding(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # [B, h, w, cin, kh, kw] -> [B*h*w, kh*kw*cin] ordered (kh, kw, cin)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * wd, kh * kw * cin)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(b, h, wd, f), cols


def conv2d_same(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 2-D convolution with zero "same" padding.

    x is [h, w, cin] or [B, h, w, cin]; filters [f, kh, kw, cin]; bias [f].
    Kernels taller than the input are fine, the padding covers them.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or filters.ndim != 4 or bias.shape != (filters.shape[0],):
        raise ShapeError(f"conv2d_same: bad shapes input={x.shape} filters={filters.shape} bias={bias.shape}")
    if x.shape[-1] != filters.shape[-1]:
        raise ShapeError(
            f"conv2d_same: input channels {x.shape[-1]} != filter channels {filters.shape[-1]} "
            f"(input {x.shape}, filters {filters.shape})"
        )
    xd = x.data if batched else x.data[None]
    wd = filters.data
    out, cols = _correlate_same(xd, wd)
    out = out + bias.data
    f, kh, kw, cin = wd.shape

    def bw(g):
        g4 = g if batched else g[None]
        gflat = g4.reshape(-1, f)
        gw = (gflat.T @ cols).reshape(wd.shape)
        gb = gflat.sum(axis=0)
        # Gradient wrt input is a same-size correlation of g with the flipped
        # kernel, channels swapped; padding mirrors the forward split.
        pt, pb = same_padding(kh)
        pl, pr = same_padding(kw)
        gp = np.pad(g4, ((0, 0), (pb, pt), (pr, pl), (0, 0)))
        wflip = wd[:, ::-1, ::-1, :].transpose(3, 1, 2, 0)  # [cin, kh, kw, f]
        win = sliding_window_view(gp, (kh, kw), axis=(1, 2))
        b, h, w_, _ = g4.shape
        gcols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w_, kh * kw * f)
        gx = (gcols @ wflip.reshape(cin, -1).T).reshape(b, h, w_, cin)
        return (gx if batched else gx[0]), gw, gb

    return _record("conv2d_same", out if batched else out[0], (x, filters, bias), bw)


def avgpool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/cols that don't fill a window are dropped."""
    ph, pw = pool
    if ph < 1 or pw < 1:
        raise ShapeError(f"avgpool2d: pool sizes must be >= 1, got {pool}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"avgpool2d: expected [h,w,c] or [B,h,w,c], got {x.shape}")
    xd = x.data if batched else x.data[None]
    b, h, w, c = xd.shape
    oh, ow = h // ph, w // pw
    if oh == 0 or ow == 0:
        raise ShapeError(f"avgpool2d: pool {pool} larger than input {x.shape}")
    crop = xd[:, : oh * ph, : ow * pw, :]
    out = crop.reshape(b, oh, ph, ow, pw, c).mean(axis=(2, 4))

    def bw(g):
        g4 = g if batched else g[None]
        gx = np.zeros_like(xd)
        spread = np.repeat(np.repeat(g4, ph, axis=1), pw, axis=2) / (ph * pw)
        gx[:, : oh * ph, : ow * pw, :] = spread
        return (gx if batched else gx[0],)

    return _record("avgpool2d", out if batched else out[0], (x,), bw)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` set (overwritten,
    not accumulated across calls).  Returns ``{leaf: grad}``; restricted to
    ``params`` when given.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._backward is None:
        raise RuntimeError("backward: loss is detached from the tape (no recorded ops require grad)")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[id(node)] = node
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._backward is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return {t: t.grad for t in leaves.values()}
    out = {}
    for p in params:
        out[p] = p.grad if id(p) in leaves else np.zeros_like(p.data)
    return out


def numerical_grad(fn: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn()`` wrt every element of ``t`` (in place perturbation)."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


# Dispatch table used by generic callers.
OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "conv2d_same": conv2d_same,
    "avgpool2d": avgpool2d,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "transpose": transpose,
    "square": square,
}


def forward_op(op: str, *args, **kwargs) -> Tensor:
    """Apply a named op; raises KeyError for unknown names."""
    try:
        fn = OPS[op]
    except KeyError:
        raise KeyError(f"unknown op '{op}'; known: {sorted(OPS)}") from None
    return fn(*args, **kwargs)
