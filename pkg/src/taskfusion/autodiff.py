"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is a classic Wengert tape: every primitive operation appends one
node (operation kind, parent handles, backward rule) to the active tape, and
``grad`` walks the node list in reverse. Two properties matter here beyond a
textbook implementation:

* Backward rules are themselves written in terms of tape primitives. When
  ``grad(..., retain=True)`` is used, the backward pass is recorded onto the
  same tape, so a gradient tensor stays a differentiable function of its
  upstream inputs. A parameter update built from such a gradient can then be
  differentiated with respect to a *different* network's parameters, which is
  what the meta update needs.
* Convolution and padding are expressed through two mutually adjoint linear
  primitives (``take`` / ``scatter_add``) plus ``matmul``, so arbitrary-order
  derivatives of convolutions come out exact by construction.

Tensors are immutable once created; non-finite values raise immediately
instead of propagating.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "paused",
    "grad",
    "sgd_step",
    "add",
    "sub",
    "neg",
    "mul",
    "square",
    "abs_",
    "maximum",
    "relu",
    "sigmoid",
    "matmul",
    "transpose",
    "reshape",
    "take",
    "scatter_add",
    "broadcast_to",
    "concat0",
    "sum_",
    "mean_",
    "softmax0",
    "cross_entropy0",
    "conv2d",
    "set_backward_corruption",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


class TapeError(RuntimeError):
    """A gradient request the tape cannot satisfy."""


_tape_stack: list["Tape"] = []
_pause_depth: int = 0

# Negative-control hook: when set to an op name, that op's backward rule is
# deliberately scaled wrong so verification harnesses can prove they detect
# broken gradients. Never set outside tests / the check-grad command.
_corrupt_backward: Optional[str] = None


def set_backward_corruption(op_name: Optional[str]) -> None:
    """Install (or clear, with None) the deliberate backward-rule corruption."""
    global _corrupt_backward
    _corrupt_backward = op_name


def _recording_tape() -> Optional["Tape"]:
    if _pause_depth or not _tape_stack:
        return None
    return _tape_stack[-1]


@contextmanager
def paused():
    """Suspend recording; ops executed inside produce constant tensors."""
    global _pause_depth
    _pause_depth += 1
    try:
        yield
    finally:
        _pause_depth -= 1


class Tensor:
    """Immutable dense float64 array, optionally resident on a tape."""

    __slots__ = ("data", "tape", "node", "watched")

    def __init__(self, data, watched: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        arr.setflags(write=False)
        self.data = arr
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None
        self.watched = watched

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.tape = None
        out.node = None
        out.watched = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = " on-tape" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Arithmetic sugar; scalars are promoted to 0-d tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a plain number")
        return mul(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Optional[Callable]):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of operations; activated as a context manager."""

    __slots__ = ("nodes", "_leaves", "_leaf_refs")

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape contexts exited out of order"

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def _leaf(self, t: Tensor) -> int:
        """Handle of the leaf node standing for watched tensor `t`."""
        key = id(t)
        handle = self._leaves.get(key)
        if handle is None:
            self.nodes.append(_Node("leaf", (), None))
            handle = len(self.nodes) - 1
            self._leaves[key] = handle
            self._leaf_refs[key] = t  # keep id() stable while the tape lives
        return handle


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    # fast path: a finite sum certifies finite elements; a non-finite sum can
    # also mean benign overflow of the reduction, so confirm elementwise
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite result in op '{op}'")


def _apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _finite_or_raise(out_data, op)
    out = Tensor._wrap(out_data)
    tape = _recording_tape()
    if tape is None:
        return out
    parents = []
    on_tape = False
    for t in inputs:
        if t.tape is tape and t.node is not None:
            parents.append(t.node)
            on_tape = True
        elif t.watched:
            parents.append(tape._leaf(t))
            on_tape = True
        else:
            parents.append(-1)
    if not on_tape:
        return out
    tape.nodes.append(_Node(op, tuple(parents), backward))
    out.tape = tape
    out.node = len(tape.nodes) - 1
    return out


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    # Equal shapes, or one side a scalar (the only broadcast allowed).
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _contract_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce an output-shaped gradient onto a (possibly scalar) operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return sum_(g)
    raise ShapeError(f"cannot contract gradient {g.shape} to {shape}")


# --------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)

    def backward(g, need):
        ga = _contract_to(g, a.shape) if need[0] else None
        gb = _contract_to(g, b.shape) if need[1] else None
        return ga, gb

    return _apply("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)

    def backward(g, need):
        ga = _contract_to(g, a.shape) if need[0] else None
        gb = neg(_contract_to(g, b.shape)) if need[1] else None
        return ga, gb

    return _apply("sub", a.data - b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, need):
        return (neg(g) if need[0] else None,)

    return _apply("neg", -a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)

    def backward(g, need):
        scale = 1.01 if _corrupt_backward == "mul" else None
        ga = gb = None
        if need[0]:
            ga = _contract_to(mul(g, b), a.shape)
            if scale:
                ga = mul(ga, scale)
        if need[1]:
            gb = _contract_to(mul(g, a), b.shape)
            if scale:
                gb = mul(gb, scale)
        return ga, gb

    return _apply("mul", a.data * b.data, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, need):
        return (mul(mul(g, a), 2.0) if need[0] else None,)

    return _apply("square", a.data * a.data, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = Tensor._wrap(np.sign(a.data))  # subgradient 0 at the kink

    def backward(g, need):
        return (mul(g, sgn) if need[0] else None,)

    return _apply("abs", np.abs(a.data), (a,), backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("maximum", a, b)
    pick_a = a.data >= b.data  # ties route to the first argument
    mask_a = Tensor._wrap(pick_a.astype(np.float64))
    mask_b = Tensor._wrap((~pick_a).astype(np.float64))

    def backward(g, need):
        ga = _contract_to(mul(g, mask_a), a.shape) if need[0] else None
        gb = _contract_to(mul(g, mask_b), b.shape) if need[1] else None
        return ga, gb

    return _apply("maximum", np.maximum(a.data, b.data), (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor._wrap((a.data > 0).astype(np.float64))

    def backward(g, need):
        return (mul(g, mask) if need[0] else None,)

    return _apply("relu", np.maximum(a.data, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    holder: dict = {}

    def backward(g, need):
        if not need[0]:
            return (None,)
        s = holder["out"]
        return (mul(g, mul(s, sub(1.0, s))),)

    t = _apply("sigmoid", out, (a,), backward)
    holder["out"] = t
    return t


# --------------------------------------------------------------------------
# Linear / structural primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g, need):
        ga = matmul(g, transpose(b)) if need[0] else None
        gb = matmul(transpose(a), g) if need[1] else None
        return ga, gb

    return _apply("matmul", a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")

    def backward(g, need):
        return (transpose(g) if need[0] else None,)

    return _apply("transpose", a.data.T, (a,), backward)  # view; BLAS takes strides


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}")
    old = a.shape

    def backward(g, need):
        return (reshape(g, old) if need[0] else None,)

    return _apply("reshape", a.data.reshape(shape), (a,), backward)


# Specialized exact adjoints for structured index maps, keyed by the identity
# of the (cached, immutable) index array: out_shape -> dense fold kernel.
_fast_scatter: dict[int, tuple[tuple, Callable[[np.ndarray], np.ndarray]]] = {}


def _norm_index(idx) -> np.ndarray:
    # keep the identity of already-normalized index arrays so specialized
    # adjoints registered against them stay reachable
    if isinstance(idx, np.ndarray) and idx.dtype == np.intp and idx.ndim == 1:
        return idx
    return np.ascontiguousarray(idx, dtype=np.intp).reshape(-1)


def take(a, idx: np.ndarray, out_shape) -> Tensor:
    """Gather ``a.flat[idx]`` into ``out_shape``. Linear; adjoint of scatter_add."""
    a = as_tensor(a)
    out_shape = tuple(int(s) for s in out_shape)
    idx = _norm_index(idx)
    if idx.size != int(np.prod(out_shape, dtype=np.int64)):
        raise ShapeError("take: index count does not match output shape")
    in_shape = a.shape

    def backward(g, need):
        return (scatter_add(g, idx, in_shape) if need[0] else None,)

    out = np.take(a.data.reshape(-1), idx, mode="clip").reshape(out_shape)
    return _apply("take", out, (a,), backward)


def scatter_add(v, idx: np.ndarray, out_shape) -> Tensor:
    """Sum ``v.flat`` into a zero tensor at flat positions ``idx``."""
    v = as_tensor(v)
    out_shape = tuple(int(s) for s in out_shape)
    idx = _norm_index(idx)
    if idx.size != v.size:
        raise ShapeError("scatter_add: index count does not match value count")
    n = int(np.prod(out_shape, dtype=np.int64))
    v_shape = v.shape

    def backward(g, need):
        return (take(g, idx, v_shape) if need[0] else None,)

    fast = _fast_scatter.get(id(idx))
    if fast is not None and fast[0] == out_shape:
        out = fast[1](v.data)
    else:
        out = np.bincount(idx, weights=v.data.ravel(), minlength=n).reshape(out_shape)
    return _apply("scatter_add", out, (v,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    kshape = (1,) * (len(shape) - a.ndim) + a.shape
    axes = tuple(i for i in range(len(shape)) if kshape[i] != shape[i])
    old = a.shape

    def backward(g, need):
        if not need[0]:
            return (None,)
        gk = sum_(g, axis=axes, keepdims=True) if axes else g
        return (reshape(gk, old),)

    return _apply("broadcast_to", np.broadcast_to(a.data, shape), (a,), backward)


def concat0(parts: Iterable) -> Tensor:
    """Concatenate along axis 0."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat0 of nothing")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.ndim == 0 or p.shape[1:] != tail:
            raise ShapeError("concat0: trailing dimensions differ")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    shapes = [p.shape for p in parts]

    def backward(g, need):
        outs = []
        for k, shp in enumerate(shapes):
            if need[k]:
                idx = np.arange(offsets[k], offsets[k + 1], dtype=np.intp)
                outs.append(take(g, idx, shp))
            else:
                outs.append(None)
        return outs

    out = np.concatenate([p.data for p in parts], axis=0)
    return _apply("concat0", out, tuple(parts), backward)


# --------------------------------------------------------------------------
# Reductions and normalizations


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    xshape = a.shape
    kshape = tuple(1 if i in axes else d for i, d in enumerate(xshape))

    def backward(g, need):
        if not need[0]:
            return (None,)
        return (broadcast_to(reshape(g, kshape), xshape),)

    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)
    if axes == () and not keepdims:
        out = a.data.copy()
    return _apply("sum", np.asarray(out), (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for i in axes:
        count *= a.shape[i]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax0(a) -> Tensor:
    """Softmax along axis 0 (the channel axis)."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("softmax0 needs at least one axis")
    m = a.data.max(axis=0, keepdims=True)
    z = np.exp(a.data - m)
    out = z / z.sum(axis=0, keepdims=True)
    holder: dict = {}

    def backward(g, need):
        if not need[0]:
            return (None,)
        s = holder["out"]
        inner = sum_(mul(g, s), axis=0, keepdims=True)
        return (mul(s, sub(g, broadcast_to(inner, s.shape))),)

    t = _apply("softmax", out, (a,), backward)
    holder["out"] = t
    return t


def cross_entropy0(logits, labels) -> Tensor:
    """Mean per-position cross-entropy; class channel is axis 0."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    c = logits.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    x = logits.data
    m = x.max(axis=0)
    z = np.exp(x - m)
    s = z.sum(axis=0)
    lse = m + np.log(s)
    picked = np.take_along_axis(x, labels[None], axis=0)[0]
    n = max(labels.size, 1)
    loss = np.asarray((lse - picked).sum() / n)

    probs = z / s
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, labels[None], 1.0, axis=0)
    dlogits = Tensor._wrap((probs - onehot) / n)

    def backward(g, need):
        return (mul(g, dlogits) if need[0] else None,)

    return _apply("cross_entropy", loss, (logits,), backward)


# --------------------------------------------------------------------------
# Convolution (composite of take/matmul/reshape, so second-order ready)

_conv_idx_cache: dict[tuple, np.ndarray] = {}


def _reflect(t: np.ndarray, n: int) -> np.ndarray:
    r = np.where(t < 0, -t, t)
    return np.where(r > n - 1, 2 * (n - 1) - r, r)


def _conv_fold_kernel(c: int, h: int, w: int, kh: int, kw: int):
    """Exact adjoint of the reflect-pad + im2col gather as dense slice sums.

    Same linear map as the generic bincount scatter, just evaluated without
    indirection: patch rows are added back at their padded offsets and the
    padded rims are folded onto their mirrored interior lines.
    """
    ph, pw = kh // 2, kw // 2

    def fold(cols: np.ndarray) -> np.ndarray:
        cols = cols.reshape(c, kh, kw, h, w)
        buf = np.zeros((c, h + 2 * ph, w + 2 * pw))
        for u in range(kh):
            for v in range(kw):
                buf[:, u : u + h, v : v + w] += cols[:, u, v]
        rows = buf[:, ph : ph + h, :].copy()
        for t in range(ph):
            rows[:, ph - t, :] += buf[:, t, :]
        for t in range(h + ph, h + 2 * ph):
            rows[:, 2 * (h - 1) - (t - ph), :] += buf[:, t, :]
        out = rows[:, :, pw : pw + w].copy()
        for t in range(pw):
            out[:, :, pw - t] += rows[:, :, t]
        for t in range(w + pw, w + 2 * pw):
            out[:, :, 2 * (w - 1) - (t - pw)] += rows[:, :, t]
        return out

    return fold


def _conv_gather_indices(c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    key = (c, h, w, kh, kw)
    idx = _conv_idx_cache.get(key)
    if idx is not None:
        return idx
    ph, pw = kh // 2, kw // 2
    src_i = _reflect(np.arange(kh)[:, None] - ph + np.arange(h)[None, :], h)
    src_j = _reflect(np.arange(kw)[:, None] - pw + np.arange(w)[None, :], w)
    # index[(c,u,v),(i,j)] = c*h*w + src_i[u,i]*w + src_j[v,j]
    base = (np.arange(c) * h * w)[:, None, None, None, None]
    flat = base + src_i[None, :, None, :, None] * w + src_j[None, None, :, None, :]
    idx = np.ascontiguousarray(flat.reshape(c * kh * kw, h * w).ravel(), dtype=np.intp)
    idx.setflags(write=False)
    _conv_idx_cache[key] = idx
    _fast_scatter[id(idx)] = ((c, h, w), _conv_fold_kernel(c, h, w, kh, kw))
    return idx


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 2-D cross-correlation with reflect padding (same-size output).

    x: (C, H, W); weight: (O, C, kh, kw) with odd kernel sides; bias: (O,) or
    None. Reflect padding requires H, W > the half-kernel.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {weight.shape}")
    c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c2 != c:
        raise ShapeError(f"conv2d: {c} input channels vs weight expecting {c2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sides must be odd")
    if h <= kh // 2 or w <= kw // 2:
        raise ShapeError("conv2d: image too small for reflect padding")
    idx = _conv_gather_indices(c, h, w, kh, kw)
    cols = take(x, idx, (c * kh * kw, h * w))
    y = matmul(reshape(weight, (o, c * kh * kw)), cols)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape}, expected ({o},)")
        y = add(y, broadcast_to(reshape(bias, (o, 1)), (o, h * w)))
    return reshape(y, (o, h, w))


# --------------------------------------------------------------------------
# Gradient driver


def grad(output: Tensor, wrt: Sequence[Tensor], retain: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar w.r.t. each tensor in ``wrt``.

    Tensors unreachable from ``output`` get zero gradients. With ``retain``
    the backward computation is recorded on the same tape, making the
    returned gradients differentiable; without it the tape is left untouched.
    """
    if not isinstance(output, Tensor):
        raise TapeError("grad output must be a Tensor")
    if output.shape != ():
        raise TapeError(f"grad output must be scalar, got shape {output.shape}")
    tape = output.tape
    if tape is None or output.node is None:
        raise TapeError("grad output is not on a tape")
    wrt = list(wrt)
    nodes = tape.nodes

    handles = []
    for t in wrt:
        if t.tape is tape and t.node is not None:
            handles.append(t.node)
        else:
            handles.append(tape._leaves.get(id(t), -1))

    needs = bytearray(len(nodes))
    for hd in handles:
        if hd >= 0:
            needs[hd] = 1
    for i, node in enumerate(nodes):
        if needs[i]:
            continue
        for p in node.parents:
            if p >= 0 and needs[p]:
                needs[i] = 1
                break

    grads: dict[int, Tensor] = {}
    results: dict[int, Tensor] = {}
    wanted = {hd for hd in handles if hd >= 0}
    if needs[output.node]:
        grads[output.node] = Tensor._wrap(np.ones((), dtype=np.float64))

    ctx = tape if retain else paused()
    with ctx:
        for hd in range(output.node, -1, -1):
            g = grads.pop(hd, None)
            if g is None:
                continue
            if hd in wanted:
                results[hd] = g
            node = nodes[hd]
            if node.backward is None:
                continue
            pneeds = tuple(p >= 0 and bool(needs[p]) for p in node.parents)
            if not any(pneeds):
                continue
            pgrads = node.backward(g, pneeds)
            for p, pg, pn in zip(node.parents, pgrads, pneeds):
                if not pn or pg is None:
                    continue
                prev = grads.get(p)
                grads[p] = pg if prev is None else add(prev, pg)

    out = []
    for t, hd in zip(wrt, handles):
        r = results.get(hd) if hd >= 0 else None
        if r is None:
            r = Tensor._wrap(np.zeros(t.shape))
        out.append(r)
    return out


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    lr: float,
    differentiable: bool = False,
) -> list[Tensor]:
    """One gradient-descent step ``p - lr * g`` per parameter.

    With ``differentiable`` the update is built from tape ops, so the new
    parameters remain functions of both the old ones and the gradients; the
    result can be backpropagated through. Otherwise the step is plain
    arithmetic and the results are fresh constants.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"sgd_step: {len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"sgd_step: param {p.shape} vs grad {g.shape}")
    lr = float(lr)
    out = []
    if differentiable:
        for p, g in zip(params, grads):
            t = sub(p, mul(g, lr))
            t.watched = True
            out.append(t)
    else:
        with paused():
            for p, g in zip(params, grads):
                out.append(Tensor(p.data - lr * g.data, watched=True))
    return out
