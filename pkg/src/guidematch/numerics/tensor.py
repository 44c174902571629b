"""Float64 tensors that record the operations applied to them.

Every operation builds the value eagerly with numpy and attaches a closure
that propagates gradients to its inputs; ``Tensor.backward`` on a scalar
replays those closures in reverse topological order. Gradients only flow
into tensors created with ``requires_grad=True`` (parameters) or derived
from one, so frozen parameters cost nothing during the backward pass.
"""

from __future__ import annotations

import itertools

import numpy as np

# Per-op finiteness assertions. Training loops disable them and check the
# loss explicitly so divergence aborts cleanly instead of raising mid-graph.
CHECK_FINITE = True


class finite_checks_disabled:
    """Context manager that skips per-op finite assertions."""

    def __enter__(self):
        global CHECK_FINITE
        self._saved = CHECK_FINITE
        CHECK_FINITE = False
        return self

    def __exit__(self, *exc):
        global CHECK_FINITE
        CHECK_FINITE = self._saved
        return False


def _finite_ok(data: np.ndarray) -> bool:
    return (not CHECK_FINITE) or bool(np.isfinite(data).all())


# When set to a list, non-smooth ops append (kind, margin) records so
# finite-difference checks can reject evaluation points too close to a kink.
_MARGIN_TRACE: list[tuple[str, float]] | None = None


class margin_trace:
    """Collect distances to the nearest non-smooth point during forwards."""

    def __enter__(self) -> list[tuple[str, float]]:
        global _MARGIN_TRACE
        self._saved = _MARGIN_TRACE
        _MARGIN_TRACE = []
        return _MARGIN_TRACE

    def __exit__(self, *exc):
        global _MARGIN_TRACE
        _MARGIN_TRACE = self._saved
        return False


def _record_margin(kind: str, value: float) -> None:
    if _MARGIN_TRACE is not None:
        _MARGIN_TRACE.append((kind, float(value)))


def _as_array(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to 1-d; this keeps them.
    return np.array(data, dtype=np.float64, copy=None, order="C")


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on.

        Pure: gradients of the whole reachable graph are reset first, so
        calling it twice yields identical results.
        """
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        a, b = self.data, other.data
        _check_binary_shapes("add", a, b)
        out_data = a + b

        def bwd(g):
            if self.requires_grad:
                self._acc(_reduce_to(g, a.shape))
            if other.requires_grad:
                other._acc(_reduce_to(g, b.shape))

        return _make(out_data, (self, other), bwd, "add")

    def __radd__(self, other):
        return self.__add__(other)

    def __mul__(self, other):
        other = _coerce(other)
        a, b = self.data, other.data
        _check_binary_shapes("mul", a, b)
        out_data = a * b

        def bwd(g):
            if self.requires_grad:
                self._acc(_reduce_to(g * b, a.shape))
            if other.requires_grad:
                other._acc(_reduce_to(g * a, b.shape))

        return _make(out_data, (self, other), bwd, "mul")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_coerce(other))

    def __rsub__(self, other):
        return _coerce(other) + (-self)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, shape) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            if self.requires_grad:
                self._acc(g.reshape(old))

        return _make(out_data, (self,), bwd, "reshape")

    def transpose(self, axes) -> "Tensor":
        axes = tuple(int(a) for a in axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g):
            if self.requires_grad:
                self._acc(g.transpose(inv))

        return _make(out_data, (self,), bwd, "transpose")

    # -- reductions --------------------------------------------------------

    def sum(self, axes=None) -> "Tensor":
        if axes is None:
            out_data = self.data.sum()
            shape = self.data.shape

            def bwd(g):
                if self.requires_grad:
                    self._acc(np.broadcast_to(g, shape).copy())

            return _make(out_data, (self,), bwd, "sum")

        axes = _normalize_axes(axes, self.ndim)
        out_data = self.data.sum(axis=axes)
        shape = self.data.shape

        def bwd_axes(g):
            if self.requires_grad:
                g_exp = np.expand_dims(g, axes)
                self._acc(np.broadcast_to(g_exp, shape).copy())

        return _make(out_data, (self,), bwd_axes, "sum")


def parameter(data, name: str) -> Tensor:
    """A named leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # Only same-shape or scalar operands; silent broadcasting hides bugs.
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"shape mismatch in {op}: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    assert shape == (), "internal: only scalar-vs-tensor broadcasting is supported"
    return np.asarray(g.sum())


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    axes = tuple(sorted(int(a) for a in axes))
    if len(axes) == 0:
        raise ValueError("axes must be non-empty")
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise ValueError(f"axis {a} out of range for {ndim}-d tensor")
    return axes


def _make(data, parents, backward_fn, op_name: str) -> Tensor:
    assert _finite_ok(data), f"{op_name} produced non-finite values"
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def _tap_slice(offset: int, count: int, stride: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


# -- convolution -----------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """Cross-correlate a (C_in, H, W) map with a (C_out, C_in, kh, kw) kernel.

    Zero padding, square stride; kernel spatial dims must be odd. Output is
    (C_out, H', W') with H' = floor((H + 2*pad - kh) / stride) + 1.
    """
    if x.ndim != 3:
        raise ValueError(f"conv2d input must be 3-d (C,H,W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-d, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel spatial dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if x.shape[0] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, kernel expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    _, h, w = x.shape
    p = int(zero_pad)
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * p}x{w + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    out = np.repeat(bias.data[:, None, None], ho, axis=1).repeat(wo, axis=2)
    kd = kernel.data
    for dy in range(kh):
        ys = _tap_slice(dy, ho, stride)
        for dx in range(kw):
            xs = _tap_slice(dx, wo, stride)
            out += np.tensordot(kd[:, :, dy, dx], xp[:, ys, xs], axes=([1], [0]))

    def bwd(g):
        if bias.requires_grad:
            bias._acc(g.sum(axis=(1, 2)))
        need_k = kernel.requires_grad
        need_x = x.requires_grad
        if not (need_k or need_x):
            return
        gk = np.zeros_like(kd) if need_k else None
        gp = np.zeros_like(xp) if need_x else None
        for dy in range(kh):
            ys = _tap_slice(dy, ho, stride)
            for dx in range(kw):
                xs = _tap_slice(dx, wo, stride)
                if need_k:
                    gk[:, :, dy, dx] = np.tensordot(g, xp[:, ys, xs], axes=([1, 2], [1, 2]))
                if need_x:
                    gp[:, ys, xs] += np.tensordot(kd[:, :, dy, dx], g, axes=([0], [0]))
        if need_k:
            kernel._acc(gk)
        if need_x:
            x._acc(gp[:, p : p + h, p : p + w] if p else gp)

    return _make(out, (x, kernel, bias), bwd, "conv2d")


def conv4d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlate a (C_in, Ha, Wa, Hb, Wb) volume with 3^4 kernels.

    Fixed zero padding 1 and stride 1 on all four spatial axes, so the
    output spatial shape equals the input's.
    """
    if x.ndim != 5:
        raise ValueError(f"conv4d input must be 5-d (C,Ha,Wa,Hb,Wb), got shape {x.shape}")
    if kernel.ndim != 6 or kernel.shape[2:] != (3, 3, 3, 3):
        raise ValueError(f"conv4d kernel must be (C_out,C_in,3,3,3,3), got shape {kernel.shape}")
    c_out, c_in = kernel.shape[:2]
    if x.shape[0] != c_in:
        raise ValueError(
            f"conv4d channel mismatch: input has {x.shape[0]} channels, kernel expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv4d bias must have shape ({c_out},), got {bias.shape}")
    spatial = x.shape[1:]
    if min(spatial) < 1:
        raise ValueError(f"conv4d spatial extents must be >= 1, got {spatial}")

    xp = np.pad(x.data, ((0, 0),) + ((1, 1),) * 4)
    out = np.empty((c_out,) + spatial)
    out[:] = bias.data[(slice(None),) + (None,) * 4]
    kd = kernel.data
    taps = list(itertools.product(range(3), repeat=4))
    slabs = [tuple(slice(d, d + n) for d, n in zip(tap, spatial)) for tap in taps]
    for tap, slab in zip(taps, slabs):
        out += np.tensordot(kd[(slice(None), slice(None)) + tap], xp[(slice(None),) + slab], axes=([1], [0]))

    def bwd(g):
        if bias.requires_grad:
            bias._acc(g.sum(axis=(1, 2, 3, 4)))
        need_k = kernel.requires_grad
        need_x = x.requires_grad
        if not (need_k or need_x):
            return
        gk = np.zeros_like(kd) if need_k else None
        gp = np.zeros_like(xp) if need_x else None
        for tap, slab in zip(taps, slabs):
            sel = (slice(None), slice(None)) + tap
            if need_k:
                gk[sel] = np.tensordot(g, xp[(slice(None),) + slab], axes=([1, 2, 3, 4], [1, 2, 3, 4]))
            if need_x:
                gp[(slice(None),) + slab] += np.tensordot(kd[sel], g, axes=([0], [0]))
        if need_k:
            kernel._acc(gk)
        if need_x:
            x._acc(gp[(slice(None),) + tuple(slice(1, 1 + n) for n in spatial)])

    return _make(out, (x, kernel, bias), bwd, "conv4d")


# -- nonlinearities and normalizations --------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data >= 0
    if _MARGIN_TRACE is not None and x.data.size:
        _record_margin("kink", np.abs(x.data).min())
    out = np.where(pos, x.data, slope * x.data)

    def bwd(g):
        if x.requires_grad:
            x._acc(g * np.where(pos, 1.0, slope))

    return _make(out, (x,), bwd, "leaky_relu")


def softmax_over(x: Tensor, axes) -> Tensor:
    """Exp-normalize jointly over ``axes`` with max subtraction for stability.

    For every fixed index of the remaining axes, the output sums to 1 over
    the normalized axes.
    """
    axes = _normalize_axes(axes, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axes, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axes, keepdims=True)
            x._acc(y * (g - dot))

    return _make(y, (x,), bwd, "softmax_over")


def max_over(x: Tensor, axes) -> tuple[Tensor, np.ndarray]:
    """Joint maximum over ``axes``; ties go to the lowest linearized index.

    Returns the value tensor (shape = remaining axes) and an integer array of
    shape ``remaining + (len(axes),)`` holding the maximizing multi-index for
    the reduced axes in ascending axis order. The gradient routes entirely to
    the maximizing cell.
    """
    axes = _normalize_axes(axes, x.ndim)
    kept = tuple(a for a in range(x.ndim) if a not in axes)
    perm = kept + axes
    kept_shape = tuple(x.shape[a] for a in kept)
    red_shape = tuple(x.shape[a] for a in axes)
    xt = x.data.transpose(perm)
    flat = xt.reshape(int(np.prod(kept_shape, dtype=np.int64)), -1)
    argf = flat.argmax(axis=1)
    rows = np.arange(flat.shape[0])
    vals = flat[rows, argf].reshape(kept_shape)
    if _MARGIN_TRACE is not None and flat.shape[1] >= 2:
        top2 = np.partition(flat, flat.shape[1] - 2, axis=1)[:, -2:]
        _record_margin("kink", (top2[:, 1] - top2[:, 0]).min())
    arg = np.stack(np.unravel_index(argf, red_shape), axis=-1).reshape(kept_shape + (len(axes),))
    inv = tuple(np.argsort(perm))

    def bwd(g):
        if x.requires_grad:
            gf = np.zeros_like(flat)
            gf[rows, argf] = g.reshape(-1)
            x._acc(gf.reshape(xt.shape).transpose(inv))

    return _make(vals, (x,), bwd, "max_over"), arg


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each (h, w) channel vector of a (C, H, W) map by max(norm, eps)."""
    if x.ndim != 3:
        raise ValueError(f"l2_normalize_channels expects (C,H,W), got shape {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = x.data
    norm = np.sqrt((d * d).sum(axis=0))
    if _MARGIN_TRACE is not None and norm.size:
        _record_margin("norm", norm.min())
    denom = np.maximum(norm, eps)
    inv = 1.0 / denom
    y = d * inv

    def bwd(g):
        if x.requires_grad:
            gx = g * inv
            live = norm >= eps
            gx -= d * (((d * g).sum(axis=0) * inv**3) * live)
            x._acc(gx)

    return _make(y, (x,), bwd, "l2_normalize_channels")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._acc(g @ b.data.T)
        if b.requires_grad:
            b._acc(a.data.T @ g)

    return _make(out, (a, b), bwd, "matmul")
