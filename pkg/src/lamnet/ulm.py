"""Unified linear mixer: spatial (focal separable) and channel branches joined by IEM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fsa import FocalSpec, LsamParams, init_lsam, lsam_forward
from .nn import ConvParams, conv2d, init_conv
from .tensor import ShapeError, Tensor


@dataclass
class UlmParams:
    in_proj: ConvParams
    lsam_h: LsamParams
    lsam_v: LsamParams
    sqz: ConvParams
    exp: ConvParams
    out_proj: ConvParams
    spec: FocalSpec = FocalSpec()
    softmax: bool = False

    @property
    def channels(self) -> int:
        return self.in_proj.c_out


def init_ulm(rng, channels: int, spec: FocalSpec, groups: int, hidden_ratio: float = 1.0,
             softmax: bool = False, bias: bool = False, dtype=np.float32) -> UlmParams:
    if channels % 2:
        raise ValueError(f"ULM needs an even channel count, got {channels}")
    half = channels // 2
    hidden = max(1, int(round(hidden_ratio * half)))
    return UlmParams(
        in_proj=init_conv(rng, channels, channels, bias=bias, dtype=dtype),
        lsam_h=init_lsam(rng, half, spec, groups, "W", bias=bias, dtype=dtype),
        lsam_v=init_lsam(rng, half, spec, groups, "H", bias=bias, dtype=dtype),
        sqz=init_conv(rng, half, hidden, bias=bias, dtype=dtype),
        exp=init_conv(rng, hidden, half, bias=bias, dtype=dtype),
        out_proj=init_conv(rng, channels, channels, bias=bias, dtype=dtype),
        spec=spec,
        softmax=softmax,
    )


def csm_forward(x_half: Tensor, sqz: ConvParams, exp: ConvParams) -> Tensor:
    """``Exp(ReLU(Sqz(x)))``, purely per pixel."""
    if x_half.shape[1] != sqz.c_in:
        raise ShapeError(f"CSM expects {sqz.c_in} channels, got {x_half.shape[1]}")
    return conv2d(T.relu(conv2d(x_half, sqz)), exp)


def iem_gates(x_s: Tensor, x_c: Tensor):
    """Return the per-channel gate ``alpha`` (N, C/2, 1, 1) and per-position gate ``beta`` (N, 1, H, W)."""
    if x_s.shape != x_c.shape:
        raise ShapeError(f"IEM branches differ in shape: {x_s.shape} vs {x_c.shape}")
    n, c_half, h, w = x_s.shape
    # spatial branch: single query = channel-sum of the channel branch
    query_c = T.sum(x_c, "C")
    alpha = T.sigmoid(T.scale(T.sum(T.mul(T.expand(query_c, x_s.shape), x_s), "HW"), 1.0 / (h * w)))
    # channel branch: single query = spatial sum of the spatial branch
    query_s = T.sum(x_s, "HW")
    beta = T.sigmoid(T.scale(T.sum(T.mul(T.expand(query_s, x_c.shape), x_c), "C"), 1.0 / c_half))
    return alpha, beta


def iem_exchange(x_s: Tensor, x_c: Tensor):
    """Parameter-free cross gating; both gates are computed from the un-gated inputs."""
    alpha, beta = iem_gates(x_s, x_c)
    return T.mul(T.expand(alpha, x_s.shape), x_s), T.mul(T.expand(beta, x_c.shape), x_c)


def ulm_forward(x: Tensor, p: UlmParams, use_iem: bool = True) -> Tensor:
    if x.shape[1] != p.channels:
        raise ShapeError(f"ULM expects {p.channels} channels, got {x.shape[1]}")
    mixed = conv2d(x, p.in_proj)
    x_s, x_c = T.split_channels(mixed, 2)
    x_s = lsam_forward(x_s, p.lsam_h, p.lsam_v, p.spec, p.softmax)
    x_c = csm_forward(x_c, p.sqz, p.exp)
    if use_iem:
        x_s, x_c = iem_exchange(x_s, x_c)
    return conv2d(T.concat([x_s, x_c]), p.out_proj)
