"""Dense-tensor arithmetic with reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when any input
requires a gradient, records a :class:`Node` holding a closure that maps the
output gradient to input gradients. Nodes get a global, monotonically
increasing id at construction, so the reachable graph sorted by id is a
topological order; :func:`backward` walks it exactly reversed.

Precision follows the inputs: float32 for training, float64 for gradient
verification. Reductions go through numpy (pairwise summation for ``sum``,
BLAS for ``matmul``) with a fixed thread count, so repeated runs in the same
precision are bit-identical.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, ndtr, ndtri

LAYER_NORM_EPS = 1e-5

_node_ids = itertools.count()
_mac_counters: list[Counter] = []
_grad_enabled = True


class ShapeError(ValueError):
    """Input shapes do not conform to an op's shape rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and how to push a gradient back."""

    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and _needs_grad(*parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(op, a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(x.dtype)
    return _make("gelu", out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    out = a.data.sum(axis=axes, keepdims=keepdims) / a.dtype.type(count)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if weight is not None:
        if weight.shape != (n,):
            raise ShapeError("layer_norm", a.shape, weight.shape)
        out = out * weight.data
    if bias is not None:
        if bias.shape != (n,):
            raise ShapeError("layer_norm", a.shape, bias.shape)
        out = out + bias.data
    parents = tuple(t for t in (a, weight, bias) if t is not None)

    def backward(g):
        gx = g * weight.data if weight is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return grads

    return _make("layer_norm", out.astype(x.dtype), parents, backward)


# ---------------------------------------------------------------- linear algebra


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates of every ``matmul`` run inside the block.

    Yields a Counter keyed by the ``tag`` passed to ``matmul`` ("" if none).
    """
    counter: Counter = Counter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def record_macs(tag: str, n: int) -> None:
    for c in _mac_counters:
        c[tag] += n


def matmul(a, b, tag: str = "") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = np.matmul(a.data, b.data)
    if _mac_counters:
        record_macs(tag, math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, tag: str = "") -> Tensor:
    """``x @ weight + bias`` with weight stored (in_features, out_features)."""
    out = matmul(x, weight, tag=tag)
    return add(out, bias) if bias is not None else out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int | tuple[int, int] = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """2D cross-correlation on (B, C_in, H, W) with a (C_out, C_in, kh, kw) kernel."""
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    B, cin, H, W = x.shape
    cout, _, kh, kw = weight.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d", x.shape, weight.shape)
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data

    def window(i, j):
        return xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]

    out = np.zeros((B, Ho, Wo, cout), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(window(i, j), weight.data[:, :, i, j], axes=([1], [1]))
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError("conv2d", weight.shape, bias.shape)
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.tensordot(g, window(i, j), axes=([0, 2, 3], [0, 2, 3]))
                gx[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += \
                    np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gx[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make("conv2d", out, parents, backward)


# ---------------------------------------------------------------- layout


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice)) or i is Ellipsis or i is None
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tuple(tensors), lambda g: np.split(g, bounds, axis=axis))


def roll(a: Tensor, shift, axis) -> Tensor:
    neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _make("roll", np.roll(a.data, shift, axis=axis), (a,),
                 lambda g: (np.roll(g, neg_shift, axis=axis),))


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0; the gradient scatter-adds back."""
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _make("take", a.data[indices], (a,), backward)


# ---------------------------------------------------------------- differentiation


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss) to every reachable leaf that requires a gradient.

    Leaf gradients accumulate into ``.grad``. The traversed nodes are released
    afterwards, so a graph can be consumed once. With ``leaves`` given, returns
    their gradients in order, zeros for leaves the loss does not reach.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not on a graph (no input requires grad)")

    nodes: dict[int, tuple[Node, Tensor]] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        node = t._node
        if node is None:
            continue
        if node.backward is None:
            raise GraphError(f"graph through '{node.op}' was already consumed by backward")
        nodes[node.id] = (node, t)
        stack.extend(node.parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._node is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    for node_id in sorted(nodes, reverse=True):
        node, out = nodes[node_id]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node, out in nodes.values():
        for parent in node.parents:
            if parent._node is None and parent.requires_grad and id(parent) in grads:
                g = grads.pop(id(parent))
                parent.grad = g if parent.grad is None else parent.grad + g
        node.backward = None

    if leaves is None:
        return None
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def finite_difference_grad(fn: Callable[[np.ndarray], float], point: np.ndarray,
                           step: float = 1e-5, coords: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``coords`` restricts probing to those flat indices; the rest stay zero.
    """
    x = np.array(point, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------- randomness


class Rng:
    """Seeded counter-based generator (numpy's Philox4x64-10).

    ``stream(*keys)`` derives an independent generator for a named purpose
    (e.g. ``stream("mask", epoch, index)``) so draws do not depend on the
    order in which consumers ask for them.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = self._make(())

    def _make(self, keys: tuple) -> np.random.Generator:
        spawn = tuple(_key_to_int(k) for k in keys)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=spawn)))

    def stream(self, *keys) -> np.random.Generator:
        return self._make(keys)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def beta(self, a, b, size=None):
        return self._gen.beta(a, b, size)


def _key_to_int(key) -> int:
    if isinstance(key, int):
        return key & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-bound standard deviations, via the inverse CDF."""
    lo, hi = ndtr(-bound), ndtr(bound)
    u = gen.uniform(lo, hi, size=shape)
    return (ndtri(u) * std).astype(dtype)
