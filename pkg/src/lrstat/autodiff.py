"""Small eager reverse-mode autodiff engine over float64 numpy arrays.

Every operation builds a :class:`Node` that records its parents and a closure
mapping the upstream gradient to per-parent gradients.  ``backward`` walks the
recorded tape in reverse topological order.

Shapes are strict: binary elementwise ops require equal shapes, broadcasting
is only available through the explicit :func:`broadcast_to` op.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Node",
    "ShapeError",
    "DegenerateInputError",
    "NORM_EPS",
    "RNG_ALGORITHM",
    "make_rng",
    "no_grad",
    "constant",
    "variable",
    "add",
    "sub",
    "mul",
    "scale",
    "absolute",
    "square",
    "relu",
    "sqrt",
    "reduce_sum",
    "mean",
    "reshape",
    "broadcast_to",
    "matmul",
    "conv2d",
    "avgpool2d",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "take_along_last",
    "slice_flat",
    "backward",
    "grad_check",
]

NORM_EPS = 1e-12
RNG_ALGORITHM = "numpy.PCG64"

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input has (near) zero norm where a direction is required."""


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    ``grad`` always has the shape of ``value``; it starts at zero and
    accumulates across ``backward`` calls until :meth:`zero_grad`.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ShapeError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Node":
        return Node(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar keeps composite expressions readable
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return scale(self, -1.0)


def constant(value) -> Node:
    return Node(value)


def variable(value, name: str = "") -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value: np.ndarray, parents: tuple[Node, ...], fn: BackwardFn) -> Node:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Node(value)
    return Node(value, parents, fn, requires_grad=True)


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same("sub", a, b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def absolute(a: Node) -> Node:
    # sign(0) == 0 gives the documented zero subgradient
    s = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * s,))


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a: Node) -> Node:
    """Square root of a non-negative input; subgradient 0 at exactly 0."""
    if np.any(a.value < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.value)

    def fn(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), fn)


# -- shape and reductions ---------------------------------------------------


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce_sum(a: Node, axis: int) -> Node:
    axis = _norm_axis(axis, a.value.ndim, "reduce_sum")
    shape = a.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), fn)


def mean(a: Node, axis: int) -> Node:
    axis = _norm_axis(axis, a.value.ndim, "mean")
    return scale(reduce_sum(a, axis), 1.0 / a.shape[axis])


def reshape(a: Node, shape: Sequence[int]) -> Node:
    src = a.shape
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    """Numpy broadcasting made explicit; backward sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {src} -> {shape}") from exc
    lead = len(shape) - len(src)

    def fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), fn)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def fn(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), fn)


# -- convolution and pooling ------------------------------------------------


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Node, k: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``k`` is
    ``[C_out, C_in, k_h, k_w]``.  No bias: add one with :func:`broadcast_to`.
    """
    batched = x.value.ndim == 4
    if x.value.ndim not in (3, 4) or k.value.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} k{k.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride={stride} padding={padding}")
    xv = x.value if batched else x.value[None]
    n, c, h, w = xv.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}; "
            f"output would be {conv_output_extent(h, kh, stride, padding)}x"
            f"{conv_output_extent(w, kw, stride, padding)}"
        )
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.value.reshape(co, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def fn(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (gmat.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = gx if batched else gx[0]
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, k), fn)


def avgpool2d(x: Node, window: int | tuple[int, int], stride: int | tuple[int, int] | None = None) -> Node:
    """Mean over windows of the last two axes.

    Geometry rule: windows must tile the input exactly, i.e.
    ``(H - window_h) % stride_h == 0`` and likewise for W.
    """
    wh, ww = (window, window) if isinstance(window, int) else window
    if stride is None:
        sh, sw = wh, ww
    else:
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if x.value.ndim < 2:
        raise ShapeError(f"avgpool2d: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if wh < 1 or ww < 1 or sh < 1 or sw < 1 or h < wh or w < ww or (h - wh) % sh or (w - ww) % sw:
        raise ShapeError(f"avgpool2d: window {wh}x{ww} stride {sh}x{sw} does not tile {h}x{w}")
    ho, wo = (h - wh) // sh + 1, (w - ww) // sw + 1
    area = float(wh * ww)
    xv = x.value
    out = np.zeros(xv.shape[:-2] + (ho, wo))
    for i in range(wh):
        for j in range(ww):
            out += xv[..., i : i + sh * ho : sh, j : j + sw * wo : sw]
    out /= area

    def fn(g):
        gx = np.zeros_like(xv)
        gs = g / area
        for i in range(wh):
            for j in range(ww):
                gx[..., i : i + sh * ho : sh, j : j + sw * wo : sw] += gs
        return (gx,)

    return _make(out, (x,), fn)


# -- normalisations ---------------------------------------------------------


def softmax(x: Node, axis: int = -1) -> Node:
    axis = _norm_axis(axis, x.value.ndim, "softmax")
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn)


def log_softmax(x: Node, axis: int = -1) -> Node:
    axis = _norm_axis(axis, x.value.ndim, "log_softmax")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def fn(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn)


def l2_normalize(x: Node, axis: int = -1) -> Node:
    """Scale to unit Euclidean norm along ``axis``.

    Raises :class:`DegenerateInputError` when any norm is <= ``NORM_EPS``.
    """
    axis = _norm_axis(axis, x.value.ndim, "l2_normalize")
    norm = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateInputError(f"l2_normalize: norm <= {NORM_EPS:g} (dead input)")
    y = x.value / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), fn)


def take_along_last(x: Node, index) -> Node:
    """``out[n] = x[n, index[n]]`` for 2-D ``x`` (or ``x[index]`` for 1-D)."""
    idx = np.asarray(index, dtype=np.intp)
    xv = x.value
    if xv.ndim == 1:
        if idx.ndim != 0:
            raise ShapeError("take_along_last: 1-D input needs a scalar index")
        pos = (int(idx),)
    elif xv.ndim == 2 and idx.shape == (xv.shape[0],):
        pos = (np.arange(xv.shape[0]), idx)
    else:
        raise ShapeError(f"take_along_last: index shape {idx.shape} vs input {x.shape}")
    if np.any(idx < 0) or np.any(idx >= xv.shape[-1]):
        raise IndexError(f"take_along_last: index out of range for {xv.shape[-1]} entries")
    out = np.array(xv[pos], dtype=np.float64)

    def fn(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, pos, g)
        return (gx,)

    return _make(out, (x,), fn)


def slice_flat(x: Node, start: int, stop: int, shape: Sequence[int] | None = None) -> Node:
    """``x.ravel()[start:stop]``, optionally reshaped; handy for packing parameters in one vector."""
    src = x.shape
    n = x.value.size
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_flat: [{start}:{stop}] outside {n} elements")
    out = x.value.reshape(-1)[start:stop]
    if shape is not None:
        out = out.reshape(tuple(shape))

    def fn(g):
        gx = np.zeros(n)
        gx[start:stop] = g.reshape(-1)
        return (gx.reshape(src),)

    return _make(out.copy(), (x,), fn)


# -- backward pass and gradient checking ------------------------------------


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate: ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"grad_check: step {h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    xv = variable(x)
    f(xv).backward()
    analytic = xv.grad.ravel()
    numeric = np.empty_like(analytic)
    flat = x.ravel()
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Node(x)).value)
            flat[i] = old - h
            fm = float(f(Node(x)).value)
            flat[i] = old
            numeric[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
