"""
Dense tensors with a reverse-mode tape.

Every differentiable op records a ``Node`` holding its inputs and a backward
rule. Backward rules are written in terms of the same ops, so running
``grad(..., create_graph=True)`` records the backward pass as new nodes and the
returned gradients can be differentiated again (double backprop).

Layout for image-like data is N x C x H x W, row-major.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Node",
    "Tensor",
    "add",
    "avg_downsample",
    "avg_upsample",
    "bias_add",
    "broadcast_to",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "enable_grad",
    "finite_difference_check",
    "fully_connected",
    "get_default_dtype",
    "grad",
    "graph_nodes",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "relu_margin",
    "replay",
    "reshape",
    "scale",
    "set_default_dtype",
    "sub",
    "sum_all",
    "sum_to",
    "transpose",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_local = threading.local()
_seq = itertools.count()
_default_dtype = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def _set_recording(flag: bool):
    prev = _recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    """Context manager that disables graph recording on this thread."""
    return _set_recording(False)


def enable_grad():
    """Context manager that re-enables graph recording on this thread."""
    return _set_recording(True)


@contextmanager
def relu_margin():
    """Track the smallest |pre-activation| seen by ``relu`` inside the block.

    Used to keep finite-difference checks away from ReLU kinks::

        with relu_margin() as m:
            f(x)
        assert m.value >= 1e-3
    """

    class _Margin:
        value = np.inf

    m = _Margin()
    prev = getattr(_local, "margin", None)
    _local.margin = m
    try:
        yield m
    finally:
        _local.margin = prev


class Node:
    """One recorded op: its inputs, backward rule and forward replay rule."""

    __slots__ = ("seq", "op", "inputs", "backward", "forward")

    def __init__(self, op: str, inputs: tuple, backward: Callable, forward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.forward = forward

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """An n-dimensional real array, optionally attached to a computation graph."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        arr = np.array(data, dtype=dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.node = None
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out: np.ndarray, inputs: tuple, backward: Callable, forward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = _wrap(out)
    if _recording() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, backward, forward)
    return t


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)

    def backward(g, needs):
        return g, g

    return _result("add", a.data + b.data, (a, b), backward, np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)

    def backward(g, needs):
        return g, (neg(g) if needs[1] else None)

    return _result("sub", a.data - b.data, (a, b), backward, np.subtract)


def neg(x: Tensor) -> Tensor:
    def backward(g, needs):
        return (neg(g),)

    return _result("neg", -x.data, (x,), backward, np.negative)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)

    def backward(g, needs):
        return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)

    return _result("mul", a.data * b.data, (a, b), backward, np.multiply)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)

    def backward(g, needs):
        return (scale(g, c),)

    def forward(a):
        return a * a.dtype.type(c)

    return _result("scale", forward(x.data), (x,), backward, forward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0.

    The backward rule multiplies by a constant 0/1 mask, so the second
    derivative is zero everywhere.
    """
    margin = getattr(_local, "margin", None)
    if margin is not None and x.size:
        margin.value = min(margin.value, float(np.abs(x.data).min()))
    mask = _wrap((x.data > 0).astype(x.dtype))

    def backward(g, needs):
        return (mul(g, mask),)

    def forward(a):
        return a * (a > 0).astype(a.dtype)

    return _result("relu", x.data * mask.data, (x,), backward, forward)


# ---------------------------------------------------------------------------
# shape and reductions


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = x.shape

    def backward(g, needs):
        return (broadcast_to(g, shape),)

    def forward(a):
        return np.asarray(a.sum(), dtype=a.dtype)

    return _result("sum_all", forward(x.data), (x,), backward, forward)


def _sum_axes(in_shape: tuple, out_shape: tuple) -> tuple[tuple, int]:
    lead = len(in_shape) - len(out_shape)
    if lead < 0:
        raise ValueError(f"cannot reduce {in_shape} to {out_shape}")
    axes = []
    for i, n in enumerate(out_shape):
        if n == 1 and in_shape[lead + i] != 1:
            axes.append(lead + i)
        elif n != in_shape[lead + i]:
            raise ValueError(f"cannot reduce {in_shape} to {out_shape}")
    return tuple(range(lead)) + tuple(axes), lead


def sum_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum over broadcast axes so the result has ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    in_shape = x.shape
    axes, lead = _sum_axes(in_shape, shape)

    def forward(a):
        return a.sum(axis=axes, keepdims=True).reshape(shape) if axes else a.reshape(shape)

    def backward(g, needs):
        return (broadcast_to(g, in_shape),)

    return _result("sum_to", forward(x.data), (x,), backward, forward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = x.shape
    _sum_axes(shape, in_shape)

    def forward(a):
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(g, needs):
        return (sum_to(g, in_shape),)

    return _result("broadcast_to", forward(x.data), (x,), backward, forward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)
    out_shape = out.shape

    def backward(g, needs):
        return (reshape(g, in_shape),)

    return _result("reshape", out, (x,), backward, lambda a: a.reshape(out_shape))


def transpose(x: Tensor) -> Tensor:
    """Transpose of a 2-d tensor."""
    if x.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {x.shape}")

    def backward(g, needs):
        return (transpose(g),)

    def forward(a):
        return np.ascontiguousarray(a.T)

    return _result("transpose", forward(x.data), (x,), backward, forward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), backward, np.matmul)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (works for N x O and N x O x H x W)."""
    if x.ndim < 2 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    blen = b.shape

    def forward(a, c):
        return a + c.reshape(bshape)

    def backward(g, needs):
        gb = reshape(sum_to(g, bshape), blen) if needs[1] else None
        return g, gb

    return _result("bias_add", forward(x.data, b.data), (x, b), backward, forward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ flatten(x) + bias``.

    ``x`` is either a single sample (1-d, length D) or a batch whose leading
    axis is N; every other axis is flattened.
    """
    single = x.ndim == 1
    n = 1 if single else x.shape[0]
    d = x.size // n
    if weight.ndim != 2 or weight.shape[1] != d:
        raise ValueError(f"fully_connected: weight {weight.shape} does not accept input of length {d}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    flat = reshape(x, (n, d))
    out = bias_add(matmul(flat, transpose(weight)), bias)
    return reshape(out, (weight.shape[0],)) if single else out


# ---------------------------------------------------------------------------
# convolution
#
# conv2d, conv2d_input_grad and conv2d_weight_grad are each bilinear and are
# adjoints of one another, so their backward rules close over the same family.


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _conv_fwd(x, w, stride, padding):
    kh, kw = w.shape[2:]
    ho = _out_extent(x.shape[2], kh, stride, padding)
    wo = _out_extent(x.shape[3], kw, stride, padding)
    win = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, in_hw, stride, padding):
    n, _, ho, wo = g.shape
    c, kh, kw = w.shape[1:]
    h, wd = in_hw
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(g, w))
    cols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + hs : stride, b : b + ws : stride] += cols[..., a, b]
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(dxp)


def _conv_weight_grad(x, g, k_hw, stride, padding):
    kh, kw = k_hw
    ho, wo = g.shape[2:]
    win = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_raw(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    in_hw = x.shape[2:]
    k_hw = w.shape[2:]

    def backward(g, needs):
        gx = conv2d_input_grad(g, w, in_hw, stride, padding) if needs[0] else None
        gw = conv2d_weight_grad(x, g, k_hw, stride, padding) if needs[1] else None
        return gx, gw

    def forward(a, b):
        return _conv_fwd(a, b, stride, padding)

    return _result("conv2d", forward(x.data, w.data), (x, w), backward, forward)


def conv2d_input_grad(g: Tensor, w: Tensor, in_hw: tuple, stride: int, padding: int) -> Tensor:
    """Gradient of conv2d w.r.t. its input (a transposed convolution)."""
    k_hw = w.shape[2:]

    def backward(h, needs):
        gg = _conv_raw(h, w, stride, padding) if needs[0] else None
        gw = conv2d_weight_grad(h, g, k_hw, stride, padding) if needs[1] else None
        return gg, gw

    def forward(a, b):
        return _conv_input_grad(a, b, in_hw, stride, padding)

    return _result("conv2d_input_grad", forward(g.data, w.data), (g, w), backward, forward)


def conv2d_weight_grad(x: Tensor, g: Tensor, k_hw: tuple, stride: int, padding: int) -> Tensor:
    """Gradient of conv2d w.r.t. its weight."""
    in_hw = x.shape[2:]

    def backward(h, needs):
        gx = conv2d_input_grad(g, h, in_hw, stride, padding) if needs[0] else None
        gg = _conv_raw(x, h, stride, padding) if needs[1] else None
        return gx, gg

    def forward(a, b):
        return _conv_weight_grad(a, b, k_hw, stride, padding)

    return _result("conv2d_weight_grad", forward(x.data, g.data), (x, g), backward, forward)


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: N x C x H x W, weight: O x C x kh x kw, bias: O.
    Output extents are ``(H + 2*padding - kh) // stride + 1`` (likewise W).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive int, got {stride!r}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be nonnegative, got {padding}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    out = _conv_raw(x, weight, int(stride), int(padding))
    if bias is not None:
        out = bias_add(out, bias)
    return out


# ---------------------------------------------------------------------------
# pooling


def _check_factor(x: Tensor, factor: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d tensor, got shape {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be a positive int, got {factor!r}")


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` windows."""
    _check_factor(x, factor)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_downsample: factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return x

    def forward(a):
        return a.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g, needs):
        return (avg_upsample(g, factor),)

    return _result("avg_downsample", forward(x.data), (x,), backward, forward)


def avg_upsample(x: Tensor, factor: int) -> Tensor:
    """Adjoint of ``avg_downsample``: spread each value over its window, divided by factor**2."""
    _check_factor(x, factor)
    if factor == 1:
        return x
    inv = 1.0 / (factor * factor)

    def forward(a):
        return np.repeat(np.repeat(a, factor, axis=2), factor, axis=3) * a.dtype.type(inv)

    def backward(g, needs):
        return (avg_downsample(g, factor),)

    return _result("avg_upsample", forward(x.data), (x,), backward, forward)


# ---------------------------------------------------------------------------
# differentiation


def _topo(output: Tensor) -> list[Tensor]:
    seen = set()
    found = []
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(i for i in t.node.inputs if i.requires_grad)
    found.sort(key=lambda t: t.node.seq)
    return found


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients can be differentiated again. Tensors that ``output``
    does not depend on get an all-zero gradient.
    """
    if output.size != 1:
        raise ValueError(f"grad: output must be a scalar, got shape {output.shape}")
    wrt = list(wrt)
    order = _topo(output)
    needed = {id(w) for w in wrt}
    for t in order:
        if any(id(i) in needed for i in t.node.inputs):
            needed.add(id(t))

    grads: dict[int, Tensor] = {}
    if id(output) in needed:
        grads[id(output)] = _wrap(np.ones_like(output.data))
    keep = {id(w) for w in wrt}
    with _set_recording(create_graph):
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None:
                continue
            if id(t) not in keep:
                del grads[id(t)]
            inputs = t.node.inputs
            needs = tuple(id(i) in needed for i in inputs)
            for inp, gi, need in zip(inputs, t.node.backward(g, needs), needs):
                if not need or gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = _wrap(np.zeros_like(w.data))
        elif not create_graph and g.node is not None:
            g = g.detach()
        out.append(g)
    return out


def graph_nodes(output: Tensor) -> list[Node]:
    """Nodes reachable from ``output`` in recording (topological) order."""
    return [t.node for t in _topo(output)]


def replay(output: Tensor) -> np.ndarray:
    """Recompute ``output`` from its leaves by re-running every recorded forward rule."""
    values: dict[int, np.ndarray] = {}
    for t in _topo(output):
        args = [values.get(id(i), i.data) for i in t.node.inputs]
        values[id(t)] = t.node.forward(*args)
    return values.get(id(output), output.data)


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between ``grad(f, x)`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``indices`` restricts the comparison to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64 if x.dtype == np.float64 else x.dtype)
    xt = Tensor(base, requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    analytic = analytic.data.reshape(-1)
    idx = range(base.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        with no_grad():
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
