"""Rank-4 tensors with reverse-mode differentiation.

Every value is an ``(N, C, H, W)`` array. Operations are ``Function``
subclasses; applying one while gradients are enabled records a node that
carries a global sequence number. ``backward`` replays the reachable nodes in
strictly decreasing sequence order, i.e. reverse recording order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

AXES = {"N": 0, "C": 1, "H": 2, "W": 3}
DTYPES = (np.float32, np.float64)

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense ``(N, C, H, W)`` array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return scale(self, -1.0)


class Node:
    __slots__ = ("fn", "inputs", "output", "seq")

    def __init__(self, fn: "Function", inputs: Sequence[Optional[Tensor]], output: Tensor):
        self.fn = fn
        self.inputs = inputs
        self.output = output
        self.seq = next(_seq)


class Function:
    """A differentiable operation.

    ``forward`` receives raw arrays (``None`` for absent optional inputs) and
    returns an array; ``backward`` receives the output gradient and returns one
    gradient (or ``None``) per input.
    """

    differentiable = True
    needs_input_grad: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Optional[Tensor], **kwargs) -> Tensor:
        fn = cls()
        fn.needs_input_grad = tuple(t is not None and t.requires_grad for t in inputs)
        dtypes = {t.dtype for t in inputs if t is not None}
        if len(dtypes) > 1:
            raise TypeError(f"{cls.__name__}: mixed dtypes {sorted(map(str, dtypes))}")
        out = Tensor(fn.forward(*(None if t is None else t.data for t in inputs), **kwargs))
        if _grad_enabled and cls.differentiable and any(
            t is not None and t.requires_grad for t in inputs
        ):
            out.requires_grad = True
            out._node = Node(fn, inputs, out)
        return out


def _check_same(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class _Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, g):
        return (g * g.dtype.type(self.factor),)


class _Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, a.dtype.type(0))

    def backward(self, g):
        return (np.where(self.mask, g, g.dtype.type(0)),)


class _Sigmoid(Function):
    def forward(self, a):
        self.y = _sigmoid(a)
        return self.y

    def backward(self, g):
        return (g * self.y * (1 - self.y),)


class _Gelu(Function):
    def forward(self, a):
        self.a = a
        return gelu_array(a)

    def backward(self, g):
        return (g * gelu_grad_array(self.a),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1 / (1 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1 + e)
    return out


_INV_SQRT2 = 1 / np.sqrt(2.0)
_INV_SQRT2PI = 1 / np.sqrt(2 * np.pi)


def gelu_array(a: np.ndarray) -> np.ndarray:
    """Exact GELU ``x * Phi(x)`` on a raw array."""
    t = a.dtype.type
    return t(0.5) * a * (t(1) + erf(a * t(_INV_SQRT2)))


def gelu_grad_array(a: np.ndarray) -> np.ndarray:
    t = a.dtype.type
    cdf = t(0.5) * (t(1) + erf(a * t(_INV_SQRT2)))
    pdf = t(_INV_SQRT2PI) * np.exp(t(-0.5) * a * a)
    return cdf + a * pdf


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return _Scale.apply(a, factor=float(factor))


def relu(a: Tensor) -> Tensor:
    return _Relu.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return _Sigmoid.apply(a)


def gelu(a: Tensor) -> Tensor:
    return _Gelu.apply(a)


_UNARY = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a Python scalar as ``b``."""
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        if not isinstance(b, Tensor):
            raise TypeError(f"{op} needs a second tensor")
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def _axes(axes) -> tuple:
    if isinstance(axes, str):
        axes = [axes] if axes in AXES else list(axes)
    out = []
    for ax in axes:
        idx = AXES[ax] if isinstance(ax, str) else int(ax)
        if not 0 <= idx < 4:
            raise ValueError(f"axis {ax!r} out of range")
        out.append(idx)
    return tuple(sorted(set(out)))


class _Sum(Function):
    def forward(self, a, axes):
        self.shape = a.shape
        return a.sum(axis=axes, keepdims=True)

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


def reduce(op: str, a: Tensor, axes) -> Tensor:
    """Sum or mean over any subset of ``N, C, H, W``; reduced axes keep extent 1."""
    if a.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    ax = _axes(axes)
    s = _Sum.apply(a, axes=ax)
    if op == "sum":
        return s
    if op == "mean":
        count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
        return scale(s, 1.0 / count)
    raise ValueError(f"unknown reduction {op!r}")


def sum(a: Tensor, axes="NCHW") -> Tensor:  # noqa: A001
    return reduce("sum", a, axes)


def mean(a: Tensor, axes="NCHW") -> Tensor:
    return reduce("mean", a, axes)


class _Expand(Function):
    def forward(self, a, shape):
        self.axes = tuple(i for i in range(4) if a.shape[i] == 1 and shape[i] != 1)
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (g.sum(axis=self.axes, keepdims=True),)


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat unit axes of ``a`` up to ``shape``."""
    shape = tuple(int(s) for s in shape)
    for have, want in zip(a.shape, shape):
        if have != want and have != 1:
            raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    return _Expand.apply(a, shape=shape)


class _Concat(Function):
    def forward(self, *arrays):
        self.splits = np.cumsum([x.shape[1] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=1))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    return _Concat.apply(*tensors)


class _SliceChannels(Function):
    def forward(self, a, start, stop):
        self.shape, self.start, self.stop = a.shape, start, stop
        return a[:, start:stop].copy()

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[:, self.start:self.stop] = g
        return (out,)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] invalid for {a.shape}")
    return _SliceChannels.apply(a, start=start, stop=stop)


def split_channels(a: Tensor, parts: int = 2) -> list:
    c = a.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} parts")
    step = c // parts
    return [slice_channels(a, i * step, (i + 1) * step) for i in range(parts)]


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor reachable from ``loss``."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(i for i in node.inputs if i is not None and i.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _accumulate(out, g)
        in_grads = node.fn.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if inp is None or ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig
        # release saved activations once consumed
        node.fn = None
        node.inputs = ()
        out._node = None


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    # grads are never mutated in place, so sharing the array is safe
    t.grad = g if t.grad is None else t.grad + g


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    seed: int = 0,
    return_worst: bool = False,
):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the inputs to a tensor. A non-scalar output is contracted with a
    fixed random projection so every output coordinate contributes. Inputs must
    be float64.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
    probe = f(*inputs)
    proj = None
    if probe.shape != (1, 1, 1, 1):
        # dyadic weights in [-1, 1] without zeros: linear maps of dyadic inputs difference exactly
        k = np.random.default_rng(seed).integers(1, 1025, probe.shape)
        sign = np.where(np.random.default_rng(seed + 1).integers(0, 2, probe.shape) == 1, 1.0, -1.0)
        proj = sign * k / 1024.0

    def scalar(out: Tensor) -> Tensor:
        if proj is None:
            return out
        return sum(mul(out, Tensor(proj)))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = scalar(f(*inputs))
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: f produced non-finite values")
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = (0.0, None)
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            an = analytic[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                fp = scalar(f(*inputs)).item()
                flat[j] = orig - epsilon
                fm = scalar(f(*inputs)).item()
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("grad_check: f produced non-finite values")
                cd = (fp - fm) / (2 * epsilon)
                err = abs(an[j] - cd) / max(abs(an[j]), abs(cd), 1e-8)
                if err > worst[0]:
                    worst = (err, (i, np.unravel_index(j, t.shape)))
    for t in inputs:
        t.grad = None
    return worst if return_worst else worst[0]


def parameters_require_grad(params: Iterable[Tensor], flag: bool = True):
    for p in params:
        p.requires_grad = flag
