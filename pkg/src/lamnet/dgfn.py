"""Dual-gated feed-forward network: expand, 3x3 depthwise, self-gate + cross-gate, squeeze."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConvParams, conv2d, init_conv
from .tensor import ShapeError, Tensor


@dataclass
class DgfnParams:
    exp1: ConvParams
    dw: ConvParams
    sqz: ConvParams

    @property
    def channels(self) -> int:
        return self.exp1.c_in


def init_dgfn(rng, channels: int, bias: bool = False, dtype=np.float32) -> DgfnParams:
    wide = 2 * channels
    return DgfnParams(
        exp1=init_conv(rng, channels, wide, bias=bias, dtype=dtype),
        dw=init_conv(rng, wide, wide, (3, 3), groups=wide, bias=bias, dtype=dtype),
        sqz=init_conv(rng, wide, channels, bias=bias, dtype=dtype),
    )


def gate_stats(x: Tensor, p: DgfnParams):
    """The two pre-squeeze gated halves: ``X1*GELU(X1)`` and ``X2*GELU(X1)``."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"DGFN expects {p.channels} channels, got {x.shape[1]}")
    x1, x2 = T.split_channels(conv2d(conv2d(x, p.exp1), p.dw), 2)
    g1 = T.gelu(x1)
    return T.mul(x1, g1), T.mul(x2, g1)


def dgfn_forward(x: Tensor, p: DgfnParams) -> Tensor:
    self_gate, cross_gate = gate_stats(x, p)
    return conv2d(T.concat([self_gate, cross_gate]), p.sqz)


def histogram_csv(values: np.ndarray, bins: int = 64) -> str:
    """``bin_left,count`` rows over the value range."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=bins)
    buf = io.StringIO()
    buf.write("bin_left,count\n")
    for left, count in zip(edges[:-1], counts):
        buf.write(f"{left:.9g},{count}\n")
    return buf.getvalue()
