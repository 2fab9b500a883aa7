"""Focal separable attention along one spatial axis, and its H-then-V composition.

Around every position the axis is cut into levels. Level ``l`` contributes
``steps[l]`` agent tokens per side, each the mean of ``strides[l]`` adjacent
pixels; the centre pixel is kept as is. A per-position, per-group weight vector
of length K then mixes the K tokens.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .nn import ConvParams, conv2d, dwconv1d, init_conv, record_macs
from .tensor import Function, ShapeError, Tensor

_AXIS_INDEX = {"H": 2, "W": 3}


class FocalCoverageWarning(UserWarning):
    """The focal kernel is longer than the axis can supply real pixels for."""


@dataclass(frozen=True)
class FocalSpec:
    strides: Tuple[int, ...] = (1, 2, 4)
    steps: Tuple[int, ...] = (3, 2, 1)

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "steps", tuple(int(t) for t in self.steps))
        if len(self.strides) != len(self.steps) or not self.strides:
            raise ValueError("strides and steps must be non-empty and of equal length")
        if any(s < 1 for s in self.strides) or any(t < 1 for t in self.steps):
            raise ValueError("strides and steps must be positive")
        if any(a > b for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be non-decreasing, got {list(self.strides)}")

    @classmethod
    def parse(cls, text: str) -> "FocalSpec":
        """Parse ``"1,2,4/3,2,1"``."""
        strides, steps = text.split("/")
        return cls(tuple(int(v) for v in strides.split(",")), tuple(int(v) for v in steps.split(",")))

    def __str__(self):
        return f"{','.join(map(str, self.strides))}/{','.join(map(str, self.steps))}"


def kernel_len(spec: FocalSpec) -> int:
    return 1 + 2 * sum(spec.steps)


def receptive_field(spec: FocalSpec) -> int:
    return 1 + 2 * sum(s * t for s, t in zip(spec.strides, spec.steps))


def agent_windows(spec: FocalSpec) -> List[Tuple[int, int]]:
    """Inclusive pixel-offset range ``(lo, hi)`` of every slot, far-negative first."""
    positive = []
    base = 1
    for s, t in zip(spec.strides, spec.steps):
        for j in range(t):
            lo = base + j * s
            positive.append((lo, lo + s - 1))
        base += s * t
    negative = [(-hi, -lo) for lo, hi in reversed(positive)]
    return negative + [(0, 0)] + positive


def _shifted(a: np.ndarray, axis: int, start: int, n: int) -> np.ndarray:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + n)
    return a[tuple(idx)]


def _pad_axis(x: np.ndarray, axis: int, reach: int) -> np.ndarray:
    shape = list(x.shape)
    shape[axis] += 2 * reach
    xp = np.zeros(shape, dtype=x.dtype)
    _shifted(xp, axis, reach, x.shape[axis])[...] = x
    return xp


def _box_sums(xp: np.ndarray, axis: int, widths) -> dict:
    """``box[s][j] = sum_{d<s} xp[j+d]`` for every distinct width ``s``."""
    length = xp.shape[axis]
    out = {}
    for s in sorted(set(widths)):
        acc = _shifted(xp, axis, 0, length - s + 1).copy()
        for d in range(1, s):
            acc += _shifted(xp, axis, d, length - s + 1)
        out[s] = acc
    return out


def window_sums(x: np.ndarray, axis: int, windows, reach: int) -> np.ndarray:
    """For every window (lo, hi): ``y[p] = sum_{d=lo..hi} x[p+d]``, zeros outside.

    Windows are stacked on a new axis 2, giving ``(N, C, K, H, W)``.
    """
    n = x.shape[axis]
    boxes = _box_sums(_pad_axis(x, axis, reach), axis, [hi - lo + 1 for lo, hi in windows])
    return np.stack([_shifted(boxes[hi - lo + 1], axis, reach + lo, n) for lo, hi in windows], axis=2)


def window_sums_adjoint(g: np.ndarray, axis: int, windows, reach: int) -> np.ndarray:
    """Adjoint of ``window_sums``: ``g`` is ``(N, C, K, H, W)``, result is ``(N, C, H, W)``."""
    n = g.shape[axis + 1]
    shape = list(g.shape[:2]) + list(g.shape[3:])
    length = n + 2 * reach
    per_width = {}
    for slot, (lo, hi) in enumerate(windows):
        s = hi - lo + 1
        if s not in per_width:
            bshape = list(shape)
            bshape[axis] = length - s + 1
            per_width[s] = np.zeros(bshape, dtype=g.dtype)
        _shifted(per_width[s], axis, reach + lo, n)[...] += g[:, :, slot]
    full = list(shape)
    full[axis] = length
    gxp = np.zeros(full, dtype=g.dtype)
    for s in sorted(per_width):
        for d in range(s):
            _shifted(gxp, axis, d, length - s + 1)[...] += per_width[s]
    return _shifted(gxp, axis, reach, n)


class _FocalAgents(Function):
    def forward(self, x, axis, spec):
        self.axis = _AXIS_INDEX[axis]
        self.windows = agent_windows(spec)
        self.reach = receptive_field(spec) // 2
        self.div = np.array([hi - lo + 1 for lo, hi in self.windows], dtype=x.dtype)
        sums = window_sums(x, self.axis, self.windows, self.reach)
        sums /= self.div[None, None, :, None, None]
        n, c, k, h, w = sums.shape
        return sums.reshape(n, c * k, h, w)

    def backward(self, g):
        n, ck, h, w = g.shape
        k = len(self.windows)
        g5 = g.reshape(n, ck // k, k, h, w) / self.div[None, None, :, None, None]
        return (np.ascontiguousarray(window_sums_adjoint(g5, self.axis, self.windows, self.reach)),)


def focal_agents(x: Tensor, axis: str, spec: FocalSpec) -> Tensor:
    """Agent tokens ``(N, C*K, H, W)``; channel ``c*K + k`` holds slot ``k`` of channel ``c``.

    Out-of-image pixels count as zero while the divisor stays the stride.
    """
    if axis not in _AXIS_INDEX:
        raise ValueError(f"axis must be 'H' or 'W', got {axis!r}")
    k = kernel_len(spec)
    extent = x.shape[_AXIS_INDEX[axis]]
    if k > 2 * extent + 1:
        warnings.warn(
            f"focal kernel K={k} exceeds 2*{axis}+1={2 * extent + 1}; agents are mostly padding",
            FocalCoverageWarning,
            stacklevel=2,
        )
    return _FocalAgents.apply(x, axis=axis, spec=spec)


@dataclass
class LsamParams:
    """Weight generator for one axis: depthwise 1-D conv of length K, then 1x1 to G*K."""

    dw: ConvParams
    pw: ConvParams
    groups: int = 4

    def __post_init__(self):
        c_b = self.dw.c_out
        if c_b % self.groups:
            raise ValueError(f"branch channels {c_b} not divisible by groups {self.groups}")
        if self.pw.c_out != self.groups * self.kernel_len:
            raise ValueError(
                f"generator emits {self.pw.c_out} channels, expected G*K={self.groups * self.kernel_len}"
            )

    @property
    def kernel_len(self) -> int:
        return max(self.dw.kernel)

    @property
    def channels(self) -> int:
        return self.dw.c_out


def init_lsam(rng, channels: int, spec: FocalSpec, groups: int, axis: str,
              bias: bool = False, dtype=np.float32) -> LsamParams:
    k = kernel_len(spec)
    kernel = (1, k) if axis == "W" else (k, 1)
    dw = init_conv(rng, channels, channels, kernel, groups=channels, bias=bias, dtype=dtype)
    pw = init_conv(rng, channels, groups * k, (1, 1), bias=bias, dtype=dtype)
    # dynamic weights multiply the features, so start them near 1/K in scale
    pw.weight.data *= pw.weight.dtype.type(1.0 / k)
    return LsamParams(dw, pw, groups)


class _GroupSoftmax(Function):
    def forward(self, a, groups):
        n, gk, h, w = a.shape
        a5 = a.reshape(n, groups, gk // groups, h, w)
        e = np.exp(a5 - a5.max(axis=2, keepdims=True))
        self.y = e / e.sum(axis=2, keepdims=True)
        return self.y.reshape(a.shape)

    def backward(self, g):
        g5 = g.reshape(self.y.shape)
        gx = self.y * (g5 - (g5 * self.y).sum(axis=2, keepdims=True))
        return (gx.reshape(g.shape),)


def gen_dynamic_weights(x: Tensor, axis: str, p: LsamParams, softmax: bool = False) -> Tensor:
    """Per-position weights ``(N, G*K, H, W)``; raw unless ``softmax`` normalizes over K per group."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"weight generator expects {p.channels} channels, got {x.shape[1]}")
    w = conv2d(dwconv1d(x, p.dw, axis), p.pw)
    if softmax:
        w = _GroupSoftmax.apply(w, groups=p.groups)
    return w


class _FsaApply(Function):
    def forward(self, agents, weights, groups):
        n, ck, h, w = agents.shape
        k = weights.shape[1] // groups
        c = ck // k
        self.a6 = agents.reshape(n, groups, c // groups, k, h, w)
        self.w5 = weights.reshape(n, groups, 1, k, h, w)
        y = np.zeros((n, groups, c // groups, h, w), dtype=agents.dtype)
        for slot in range(k):  # fixed accumulation order over k
            y += self.a6[:, :, :, slot] * self.w5[:, :, :, slot]
        return y.reshape(n, c, h, w)

    def backward(self, g):
        n, c, h, w = g.shape
        groups = self.w5.shape[1]
        g5 = g.reshape(n, groups, c // groups, 1, h, w)
        ga = g5 * self.w5
        gw = (g5 * self.a6).sum(axis=2)
        return ga.reshape(n, -1, h, w), gw.reshape(n, -1, h, w)


def fsa_apply(agents: Tensor, weights: Tensor, groups: int) -> Tensor:
    """``y[c, p] = sum_k weights[g*K + k, p] * agents[c*K + k, p]`` with ``g`` the group of ``c``."""
    n, ck, h, w = agents.shape
    if weights.shape[0] != n or weights.shape[2:] != (h, w):
        raise ShapeError(f"fsa_apply: agents {agents.shape} vs weights {weights.shape}")
    if weights.shape[1] % groups:
        raise ShapeError(f"fsa_apply: weight channels {weights.shape[1]} not divisible by G={groups}")
    k = weights.shape[1] // groups
    if ck % k or (ck // k) % groups:
        raise ShapeError(f"fsa_apply: {ck} agent channels incompatible with K={k}, G={groups}")
    out = _FsaApply.apply(agents, weights, groups=groups)
    record_macs("fsa_apply", out.size * k)
    return out


def fsa_axis(x: Tensor, axis: str, p: LsamParams, spec: FocalSpec, softmax: bool = False) -> Tensor:
    if p.kernel_len != kernel_len(spec):
        raise ShapeError(f"generator kernel {p.kernel_len} != focal K={kernel_len(spec)}")
    return fsa_apply(focal_agents(x, axis, spec), gen_dynamic_weights(x, axis, p, softmax), p.groups)


def lsam_forward(x: Tensor, p_h: LsamParams, p_v: LsamParams, spec: FocalSpec,
                 softmax: bool = False) -> Tensor:
    """Horizontal pass (along W) first; the vertical weights are generated from its output."""
    x_h = fsa_axis(x, "W", p_h, spec, softmax)
    return fsa_axis(x_h, "H", p_v, spec, softmax)
