"""Channels-first convolution, normalization and rearrangement operators."""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor

# ---------------------------------------------------------------------------
# MAC instrumentation: ops add their multiply-accumulate count while a
# counter is active, giving an execution-side check on the analytic model.

_mac_counters: list = []


@contextlib.contextmanager
def count_macs():
    """Collect ``{op_name: macs}`` for every instrumented op run inside the block."""
    counter: dict = {}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def record_macs(op: str, macs: int):
    for c in _mac_counters:
        c[op] = c.get(op, 0) + int(macs)


# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    groups: int = 1
    padding: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        c_out, c_in_g, kh, kw = self.weight.shape
        if self.groups < 1 or c_out % self.groups:
            raise ValueError(f"C_out={c_out} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (1, c_out, 1, 1):
            raise ShapeError(f"bias must be (1, {c_out}, 1, 1), got {self.bias.shape}")
        if self.padding is None:
            self.padding = (kh // 2, kw // 2)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out and self.weight.shape[1] == 1


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(rng, c_in, c_out, kernel=(1, 1), groups=1, bias=False, dtype=np.float32) -> ConvParams:
    kh, kw = kernel
    if c_in % groups:
        raise ValueError(f"C_in={c_in} not divisible by groups={groups}")
    shape = (c_out, c_in // groups, kh, kw)
    w = Tensor(he_uniform(rng, shape, (c_in // groups) * kh * kw, dtype), requires_grad=True)
    b = Tensor(np.zeros((1, c_out, 1, 1), dtype), requires_grad=True) if bias else None
    return ConvParams(w, b, groups)


def init_norm(channels: int, dtype=np.float32, eps: float = 1e-5) -> NormParams:
    return NormParams(
        Tensor(np.ones((1, channels, 1, 1), dtype), requires_grad=True),
        Tensor(np.zeros((1, channels, 1, 1), dtype), requires_grad=True),
        eps,
    )


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Walk dataclasses, lists and tensors depth-first in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def _dense_forward(xp, w, out_hw):
    # xp: padded (N, C, Hp, Wp); w: (O, C, kh, kw)
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    h, wd = out_hw
    if kh == 1 and kw == 1:
        cols = xp.reshape(n, c, h * wd)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, h * wd)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, h, wd), cols


def _dense_backward(g, cols, w, xp_shape, out_hw, need_x=True):
    n = g.shape[0]
    o, c, kh, kw = w.shape
    h, wd = out_hw
    g2 = g.reshape(n, o, h * wd)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if not need_x:
        return None, gw
    gcols = np.matmul(w.reshape(o, -1).T, g2)  # (N, C*kh*kw, HW)
    if kh == 1 and kw == 1:
        return gcols.reshape(xp_shape), gw
    gcols = gcols.reshape(n, c, kh, kw, h, wd)
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, i, j]
    return gxp, gw


class _Conv2d(Function):
    def forward(self, x, w, b, groups, padding):
        ph, pw = padding
        n, c, h, wd = x.shape
        o, cg, kh, kw = w.shape
        oh, ow = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
        xp = _pad(x, ph, pw)
        self.groups, self.padding, self.w, self.has_bias = groups, padding, w, b is not None
        self.xp_shape, self.out_hw = xp.shape, (oh, ow)
        if groups == c == o and cg == 1:
            self.mode = "depthwise"
            self.xp = xp
            out = np.zeros((n, c, oh, ow), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    out += w[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + oh, j:j + ow]
        elif groups == 1:
            self.mode = "dense"
            out, self.cols = _dense_forward(xp, w, (oh, ow))
        else:
            self.mode = "grouped"
            og = o // groups
            outs, self.cols = [], []
            for gi in range(groups):
                y, cols = _dense_forward(xp[:, gi * cg:(gi + 1) * cg], w[gi * og:(gi + 1) * og], (oh, ow))
                outs.append(y)
                self.cols.append(cols)
            out = np.concatenate(outs, axis=1)
        if b is not None:
            out = out + b
        return out

    def backward(self, g):
        ph, pw = self.padding
        w = self.w
        oh, ow = self.out_hw
        _, cg, kh, kw = w.shape
        if self.mode == "depthwise":
            gxp = np.zeros(self.xp_shape, dtype=g.dtype)
            gw = np.zeros_like(w)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, self.xp[:, :, i:i + oh, j:j + ow])
                    gxp[:, :, i:i + oh, j:j + ow] += w[:, 0, i, j][None, :, None, None] * g
        elif self.mode == "dense":
            gxp, gw = _dense_backward(g, self.cols, w, self.xp_shape, self.out_hw, self.needs_input_grad[0])
        else:
            og = w.shape[0] // self.groups
            n, _, hp, wp = self.xp_shape
            parts, gws = [], []
            for gi in range(self.groups):
                gx_i, gw_i = _dense_backward(
                    g[:, gi * og:(gi + 1) * og], self.cols[gi], w[gi * og:(gi + 1) * og],
                    (n, cg, hp, wp), self.out_hw,
                )
                parts.append(gx_i)
                gws.append(gw_i)
            gxp, gw = np.concatenate(parts, axis=1), np.concatenate(gws, axis=0)
        hp, wp = self.xp_shape[2:]
        gx = None if gxp is None else gxp[:, :, ph:hp - ph, pw:wp - pw]
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if self.has_bias else None
        return gx, gw, gb


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-1 cross-correlation with zero padding (same-size by default)."""
    if x.shape[1] != p.c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {p.c_in}")
    out = _Conv2d.apply(x, p.weight, p.bias, groups=p.groups, padding=tuple(p.padding))
    kh, kw = p.kernel
    record_macs("conv2d", out.size * (p.c_in // p.groups) * kh * kw)
    return out


def dwconv1d(x: Tensor, p: ConvParams, axis: str) -> Tensor:
    """Depthwise 1-D convolution along ``axis`` ('H' or 'W') with zero same-padding.

    The kernel may be stored as ``(C, 1, 1, k)`` or ``(C, 1, k, 1)``; it is
    oriented along ``axis`` either way.
    """
    if not p.depthwise:
        raise ValueError("dwconv1d needs depthwise parameters (groups == C_in == C_out)")
    kh, kw = p.kernel
    if min(kh, kw) != 1:
        raise ShapeError(f"dwconv1d needs a 1-D kernel, got {kh}x{kw}")
    k = max(kh, kw)
    if axis == "W":
        shape, pad = (p.c_out, 1, 1, k), (0, k // 2)
    elif axis == "H":
        shape, pad = (p.c_out, 1, k, 1), (k // 2, 0)
    else:
        raise ValueError(f"axis must be 'H' or 'W', got {axis!r}")
    w = p.weight if p.weight.shape == shape else _reshape(p.weight, shape)
    return conv2d(x, ConvParams(w, p.bias, p.groups, pad))


class _Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


def _reshape(t: Tensor, shape) -> Tensor:
    return _Reshape.apply(t, shape=tuple(shape))


# ---------------------------------------------------------------------------
# normalization


class _LayerNormChannels(Function):
    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        self.inv = 1 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = xc * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        gx_hat = g * self.gamma
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, ggamma, gbeta


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over channels at every (n, h, w), population variance, then affine."""
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (1, c, 1, 1):
            raise ShapeError(f"layer_norm: {name} shape {t.shape} does not match C={c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return _LayerNormChannels.apply(x, gamma, beta, eps=eps)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    return layer_norm_channels(x, p.gamma, p.beta, p.eps)


# ---------------------------------------------------------------------------
# sub-pixel rearrangement


def pixel_shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(
        n, c // (r * r), h * r, w * r
    )


def pixel_unshuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


class _PixelShuffle(Function):
    def forward(self, a, r):
        self.r = r
        return pixel_shuffle_array(a, r)

    def backward(self, g):
        return (pixel_unshuffle_array(g, self.r),)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]``."""
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: C={x.shape[1]} not divisible by r^2={r * r}")
    return _PixelShuffle.apply(x, r=r)


# ---------------------------------------------------------------------------


def count_trainables(params: Iterable, include_bias: bool = True, include_norm: bool = True) -> int:
    """Exact trainable-scalar count over conv and norm parameter records."""
    total = 0
    for p in params:
        if isinstance(p, ConvParams):
            total += p.weight.size
            if include_bias and p.bias is not None:
                total += p.bias.size
        elif isinstance(p, NormParams):
            if include_norm:
                total += p.gamma.size + p.beta.size
        else:
            raise TypeError(f"cannot count parameters of {type(p).__name__}")
    return total


def param_records(obj) -> Iterator:
    """Yield every ConvParams / NormParams nested inside ``obj``."""
    if isinstance(obj, (ConvParams, NormParams)):
        yield obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from param_records(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from param_records(item)
