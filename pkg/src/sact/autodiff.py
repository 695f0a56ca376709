"""Dense arrays with reverse-mode differentiation.

Deliberately small: only the operations the attention model needs, backed
by row-major contiguous numpy buffers. Training runs at 32-bit precision,
gradient verification at 64-bit; an op never changes the floating dtype of
its operands and mixed-dtype operands are rejected so precision cannot
drift silently.

Differentiation uses a gradient tape. While a ``Tape`` is active (as a
context manager), every op whose inputs depend on a ``Parameter`` appends
a record in execution order. ``Tape.backward`` replays the record in
reverse, which is a valid reverse topological order because the record is
append-only, and accumulates gradients. A parameter used at several sites
receives one contribution per use. Reductions rely on numpy's fixed
summation order, so results are bit-reproducible for a fixed seed on a
given platform.

Any op that produces NaN or Inf raises ``NumericalError`` immediately;
non-finite values are an error condition here, never a silent state.

Thread contract: arrays and tensors may be handed between threads freely,
but a tape is confined to the thread that recorded it. The active-tape
stack is thread-local.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul_scalar",
    "neg",
    "relu",
    "square",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "depthwise_conv3x3",
    "stack",
    "cross_entropy_with_logits",
]


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with the requested op."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf."""


_FLOAT_KINDS = ("f",)


def _validate_buffer(op: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind not in _FLOAT_KINDS:
        raise ShapeError(f"{op}: expected a floating array, got dtype {arr.dtype}")
    if any(e <= 0 for e in arr.shape):
        raise ShapeError(f"{op}: zero or negative extent in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    # ascontiguousarray would promote 0-d scalars to 1-d, so guard it.
    arr = np.asarray(arr)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A contiguous dense array, optionally tracked for differentiation."""

    __slots__ = ("data", "node")

    def __init__(self, values, dtype=None):
        arr = np.array(values, dtype=dtype, order="C")
        if arr.dtype.kind in ("i", "u", "b"):
            arr = arr.astype(np.float64)
        self.data = _validate_buffer("tensor", arr)
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named tensor with a persistent gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, values, dtype=None):
        super().__init__(values, dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(values, dtype=None) -> Tensor:
    """Wrap values in an untracked constant tensor."""
    return Tensor(values, dtype)


class _Node:
    __slots__ = ("op", "inputs", "backward", "tape")

    def __init__(self, op, inputs, backward, tape):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _tracked(t: Tensor) -> bool:
    return isinstance(t, Parameter) or t.node is not None


class Tape:
    """Execution-ordered record of differentiable ops. Single use.

    Records are appended as ops execute, so iterating them in reverse
    visits every node after all of its consumers: exactly the order a
    backward pass needs.
    """

    def __init__(self):
        self._records: list[Tensor] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dParam into every reachable Parameter.grad."""
        if self._used:
            raise RuntimeError("this tape has already been replayed")
        if loss.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss.node): np.ones((), dtype=loss.data.dtype)}
        for out in reversed(self._records):
            node = out.node
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi
                elif inp.node is not None and inp.node.tape is self:
                    key = id(inp.node)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self._records.clear()


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _validate_buffer(op, data)
    out.node = None
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        out.node = _Node(op, inputs, backward, tape)
        tape._records.append(out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    for i in range(1, min(len(sa), len(sb)) + 1):
        a, b = sa[-i], sb[-i]
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """Matrix product, 2-D or batched 3-D with matching batch extent."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: batch extents differ, {ad.shape} @ {bd.shape}")
        if ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    else:
        raise ShapeError(f"matmul supports 2-D or batched 3-D operands, got {ad.shape} @ {bd.shape}")

    def backward(g):
        if ad.ndim == 2:
            return g @ bd.T, ad.T @ g
        return g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g

    return _make("matmul", ad @ bd, (a, b), backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    nd = x.data.ndim
    perm = tuple(range(nd))[::-1] if axes is None else tuple(axes)
    if sorted(perm) != list(range(nd)):
        raise ShapeError(f"transpose: {perm} is not a permutation of {nd} axes")
    inverse = np.argsort(perm)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", np.transpose(x.data, perm), (x,), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    in_shape = x.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _make("reshape", x.data.reshape(shape), (x,), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("add", a, b)
    _check_broadcast("add", a.data.shape, b.data.shape)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _sum_to(g, sa), _sum_to(g, sb)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype("sub", a, b)
    _check_broadcast("sub", a.data.shape, b.data.shape)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _sum_to(g, sa), _sum_to(-g, sb)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul_scalar(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    if not np.isfinite(s):
        raise NumericalError("mul_scalar: scalar factor is not finite")
    factor = np.asarray(s, dtype=x.data.dtype)

    def backward(g):
        return (g * factor,)

    return _make("mul_scalar", x.data * factor, (x,), backward)


def neg(x) -> Tensor:
    return mul_scalar(x, -1.0)


def _relu_backward(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # Subgradient at exactly zero is taken as zero.
    return g * mask


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (_relu_backward(g, mask),)

    return _make("relu", np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False), (x,), backward)


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def backward(g):
        return (2.0 * xd * g,)

    return _make("square", xd * xd, (x,), backward)


def _norm_axes(op: str, axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"{op}: axis {a} out of range for {ndim}-D input")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"{op}: repeated axis in {axes}")
    return tuple(sorted(out))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    x = _as_tensor(x)
    axes = _norm_axes("sum", axis, x.data.ndim)
    in_shape = x.data.shape
    kept = tuple(1 if i in axes else e for i, e in enumerate(in_shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), in_shape),)

    return _make("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes("mean", axis, x.data.ndim)
    in_shape = x.data.shape
    kept = tuple(1 if i in axes else e for i, e in enumerate(in_shape))
    count = 1
    for i in axes:
        count *= in_shape[i]
    inv = np.asarray(1.0 / count, dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) * inv, in_shape),)

    return _make("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along one axis, max-subtracted before exponentiation."""
    x = _as_tensor(x)
    (ax,) = _norm_axes("softmax", axis, x.data.ndim)
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=ax, keepdims=True)

    def backward(g):
        inner = np.sum(g * s, axis=ax, keepdims=True)
        return (s * (g - inner),)

    return _make("softmax", s, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    the learnable elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    _same_dtype("layer_norm", x, gain, bias)
    if x.data.ndim < 1:
        raise ShapeError("layer_norm requires at least one axis")
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: affine shapes {gain.data.shape}/{bias.data.shape} do not match last extent {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return dx, dgain, dbias

    return _make("layer_norm", out, (x, gain, bias), backward)


def depthwise_conv3x3(x, kernel, bias) -> Tensor:
    """Depthwise 3x3 convolution over a batch of square grids.

    x: [B, P, P, D], kernel: [3, 3, D], bias: [D]. Zero padding keeps the
    spatial extent, each channel is convolved with its own 3x3 window.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _same_dtype("depthwise_conv3x3", x, kernel, bias)
    if x.data.ndim != 4 or x.data.shape[1] != x.data.shape[2]:
        raise ShapeError(f"depthwise_conv3x3: expected [B, P, P, D], got {x.data.shape}")
    B, P, _, D = x.data.shape
    if kernel.data.shape != (3, 3, D):
        raise ShapeError(f"depthwise_conv3x3: kernel shape {kernel.data.shape} != (3, 3, {D})")
    if bias.data.shape != (D,):
        raise ShapeError(f"depthwise_conv3x3: bias shape {bias.data.shape} != ({D},)")
    kd = kernel.data
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias.data, (B, P, P, D)).copy()
    for u in range(3):
        for v in range(3):
            out += kd[u, v] * xp[:, u : u + P, v : v + P, :]

    def backward(g):
        gp = np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0)))
        dx = np.zeros_like(x.data)
        dk = np.zeros_like(kd)
        for u in range(3):
            for v in range(3):
                dx += kd[u, v] * gp[:, 2 - u : 2 - u + P, 2 - v : 2 - v + P, :]
                dk[u, v] = (g * xp[:, u : u + P, v : v + P, :]).sum(axis=(0, 1, 2))
        db = g.sum(axis=(0, 1, 2))
        return dx, dk, db

    return _make("depthwise_conv3x3", out, (x, kernel, bias), backward)


def stack(tensors: Iterable[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: need at least one tensor")
    _same_dtype("stack", *ts)
    shape = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {t.data.shape}")

    def backward(g):
        return tuple(g[i] for i in range(len(ts)))

    return _make("stack", np.stack([t.data for t in ts]), tuple(ts), backward)


def cross_entropy_with_logits(logits, true_index: int) -> Tensor:
    """Cross-entropy of softmax(logits) against one true class.

    Computed as logsumexp(logits) - logits[true_index] with the max
    subtracted first, so large logits do not overflow.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_with_logits: expected a vector, got shape {logits.data.shape}")
    c = logits.data.shape[0]
    true_index = int(true_index)
    if not 0 <= true_index < c:
        raise ShapeError(f"cross_entropy_with_logits: index {true_index} out of range for {c} classes")
    m = np.max(logits.data)
    z = np.exp(logits.data - m)
    total = np.sum(z)
    loss = np.log(total) + m - logits.data[true_index]
    p = z / total

    def backward(g):
        gl = p.copy()
        gl[true_index] -= 1.0
        return (gl * g,)

    return _make("cross_entropy_with_logits", np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
