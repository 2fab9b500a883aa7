"""Parameter and FLOP accounting for built models, plus the closed-form cost tables.

Counting convention: one multiply-accumulate is one FLOP unless the policy asks
for two. Rows flagged ``counted`` form the subset the closed forms describe:
convolutions, dynamic aggregation and the FFN gating. LayerNorm, residual adds,
focal pooling, CSM's ReLU and the IEM are reported but sit outside that subset.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

from .dgfn import DgfnParams
from .fsa import FocalSpec, LsamParams, kernel_len, receptive_field
from .model import LamNet, LamNetConfig
from .nn import ConvParams
from .ulm import UlmParams


@dataclass(frozen=True)
class CountPolicy:
    include_bias: bool = True
    include_norm: bool = True
    flops_per_mac: int = 1

    def __post_init__(self):
        if self.flops_per_mac not in (1, 2):
            raise ValueError("flops_per_mac must be 1 or 2")


FORMULA_POLICY = CountPolicy(include_bias=False, include_norm=False)


@dataclass
class CostRow:
    name: str
    params: int
    flops: int
    part: str = "other"  # mixer | ffn | other
    counted: bool = False


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)
    policy: CountPolicy = CountPolicy()
    height: int = 0
    width: int = 0

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def subtotal(self, part: Optional[str] = None, counted_only: bool = True):
        rows = [r for r in self.rows if (part is None or r.part == part) and (r.counted or not counted_only)]
        return sum(r.params for r in rows), sum(r.flops for r in rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("name,params,flops\n")
        for r in self.rows:
            buf.write(f"{r.name},{r.params},{r.flops}\n")
        buf.write(f"total,{self.total_params},{self.total_flops}\n")
        return buf.getvalue()


def _macs(policy: CountPolicy, macs: int) -> int:
    return macs * policy.flops_per_mac


def conv_row(name, p: ConvParams, h: int, w: int, policy: CountPolicy, part="other", counted=False) -> CostRow:
    kh, kw = p.kernel
    params = p.weight.size
    macs = p.c_out * (p.c_in // p.groups) * kh * kw * h * w
    if p.bias is not None and policy.include_bias:
        params += p.bias.size
        macs += p.c_out * h * w
    return CostRow(name, params, _macs(policy, macs), part, counted)


def lsam_rows(prefix: str, p: LsamParams, spec: FocalSpec, h: int, w: int, policy: CountPolicy) -> List[CostRow]:
    c_b, k = p.channels, p.kernel_len
    return [
        conv_row(f"{prefix}.dw", p.dw, h, w, policy, "mixer", True),
        conv_row(f"{prefix}.pw", p.pw, h, w, policy, "mixer", True),
        # every slot of stride s averages s pixels: R additions per position per channel
        CostRow(f"{prefix}.pool", 0, _macs(policy, receptive_field(spec) * c_b * h * w), "mixer", False),
        CostRow(f"{prefix}.aggregate", 0, _macs(policy, k * c_b * h * w), "mixer", True),
    ]


def ulm_rows(prefix: str, p: UlmParams, h: int, w: int, policy: CountPolicy, use_iem: bool = True) -> List[CostRow]:
    c = p.channels
    c_b = c // 2
    rows = [conv_row(f"{prefix}.in_proj", p.in_proj, h, w, policy, "mixer", True)]
    rows += lsam_rows(f"{prefix}.lsam_h", p.lsam_h, p.spec, h, w, policy)
    rows += lsam_rows(f"{prefix}.lsam_v", p.lsam_v, p.spec, h, w, policy)
    rows += [
        conv_row(f"{prefix}.sqz", p.sqz, h, w, policy, "mixer", True),
        CostRow(f"{prefix}.relu", 0, _macs(policy, p.sqz.c_out * h * w), "mixer", False),
        conv_row(f"{prefix}.exp", p.exp, h, w, policy, "mixer", True),
    ]
    if use_iem:
        # one query-key dot product plus one gating multiply per element, each direction
        rows += [
            CostRow(f"{prefix}.iem_spatial", 0, _macs(policy, 2 * c_b * h * w), "mixer", False),
            CostRow(f"{prefix}.iem_channel", 0, _macs(policy, 2 * c_b * h * w), "mixer", False),
        ]
    rows.append(conv_row(f"{prefix}.out_proj", p.out_proj, h, w, policy, "mixer", True))
    return rows


def dgfn_rows(prefix: str, p: DgfnParams, h: int, w: int, policy: CountPolicy) -> List[CostRow]:
    c = p.channels
    return [
        conv_row(f"{prefix}.exp1", p.exp1, h, w, policy, "ffn", True),
        conv_row(f"{prefix}.dw", p.dw, h, w, policy, "ffn", True),
        CostRow(f"{prefix}.gelu", 0, _macs(policy, c * h * w), "ffn", True),
        CostRow(f"{prefix}.self_gate", 0, _macs(policy, c * h * w), "ffn", True),
        CostRow(f"{prefix}.cross_gate", 0, _macs(policy, c * h * w), "ffn", True),
        conv_row(f"{prefix}.sqz", p.sqz, h, w, policy, "ffn", True),
    ]


def count_model(model: LamNet, h: int, w: int, policy: CountPolicy = CountPolicy()) -> CostReport:
    """Per-layer rows for an LR input of ``h x w``."""
    cfg = model.config
    c = cfg.channels
    prm = model.params
    rows = [conv_row("shallow", prm.shallow, h, w, policy)]
    for bi, block in enumerate(prm.blocks):
        for pi, pair in enumerate(block.pairs):
            pre = f"blocks.{bi}.pairs.{pi}"
            for norm_name in ("norm1", "norm2"):
                norm = getattr(pair, norm_name)
                n_params = norm.gamma.size + norm.beta.size if policy.include_norm else 0
                # mean, centre, square, scale, affine: five ops per element
                rows.append(CostRow(f"{pre}.{norm_name}", n_params, _macs(policy, 5 * c * h * w)))
            rows += ulm_rows(f"{pre}.ulm", pair.ulm, h, w, policy, cfg.use_iem)
            rows += dgfn_rows(f"{pre}.dgfn", pair.dgfn, h, w, policy)
            rows.append(CostRow(f"{pre}.residual", 0, _macs(policy, 2 * c * h * w)))
        rows.append(CostRow(f"blocks.{bi}.residual", 0, _macs(policy, c * h * w)))
    rows.append(conv_row("trunk", prm.trunk, h, w, policy))
    rows.append(CostRow("global_residual", 0, _macs(policy, c * h * w)))
    rows.append(conv_row("recon", prm.recon, h, w, policy))
    rows.append(CostRow("pixel_shuffle", 0, 0))
    return CostReport(rows, policy, h, w)


def expected_param_count(cfg: LamNetConfig, include_norm: bool = True) -> int:
    """Trainable scalars implied by the config alone, independent of any built model."""
    c, k, g = cfg.channels, cfg.kernel_len, cfg.groups
    c_b = c // 2
    c_h = max(1, int(round(cfg.csm_hidden_ratio * c_b)))
    b = 1 if cfg.bias else 0
    ulm = 2 * (c * c + b * c) + 2 * (c_b * c_h) + b * (c_h + c_b) + 2 * (k * c_b + c_b * g * k + b * (c_b + g * k))
    dgfn = 2 * c * c + 18 * c + 2 * c * c + b * (2 * c + 2 * c + c)
    norms = 4 * c if include_norm else 0
    pairs = cfg.num_blocks * cfg.pairs_per_block * (ulm + dgfn + norms)
    out_c = 3 * cfg.scale ** 2
    return 27 * c + b * c + pairs + 9 * c * c + b * c + 9 * c * out_c + b * out_c


# ---------------------------------------------------------------------------
# closed forms, transcribed from the comparison tables


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def closed_form(arch: str, part: str, C: int, K: int, G: int = 4, H: int = 1, W: int = 1):
    """``(params, flops)`` for arch in {swinir, dlgsanet, lamnet}, part in {mixer, ffn, total}."""
    C, K, G, HW = Fraction(C), Fraction(K), Fraction(G), Fraction(H) * Fraction(W)
    tables = {
        "swinir": {
            "mixer": (4 * C**2 + K**4, 4 * HW * C**2 + 2 * HW * K**2),
            "ffn": (4 * C**2, 4 * HW * C**2 + 2 * HW * C),
        },
        "dlgsanet": {
            "mixer": (Fraction(5, 2) * C**2 + (G + 1) / 2 * K**2 * C,
                      Fraction(5, 2) * HW * C**2 + (G + 3) / 2 * K**2 * HW * C),
            "ffn": (3 * C**2 + 18 * C, 3 * HW * C**2 + 20 * HW * C),
        },
        "lamnet": {
            "mixer": (Fraction(5, 2) * C**2 + (G + 1) * K * C,
                      Fraction(5, 2) * HW * C**2 + (G + 2) * HW * K * C),
            "ffn": (4 * C**2 + 18 * C, 4 * HW * C**2 + 21 * HW * C),
        },
    }
    totals = {
        "swinir": (8 * C**2 + K**4, 8 * HW * C**2 + (2 * K**2 + 2) * HW * C),
        "dlgsanet": (Fraction(11, 2) * C**2 + 18 * C + (G + 1) / 2 * K**2 * C,
                     Fraction(11, 2) * HW * C**2 + 20 * HW * C + (G + 3) / 2 * K**2 * HW * C),
        "lamnet": (Fraction(13, 2) * C**2 + 18 * C + (G + 1) * K * C,
                   Fraction(13, 2) * HW * C**2 + 21 * HW * C + (G + 2) * K * HW * C),
    }
    if arch not in tables:
        raise ValueError(f"unknown arch {arch!r}")
    if part == "total":
        params, flops = totals[arch]
    elif part in ("mixer", "ffn"):
        params, flops = tables[arch][part]
    else:
        raise ValueError(f"unknown part {part!r}")
    return _num(params), _num(flops)


# quoted headline figures: H, W, C, K = 1280, 720, 64, 8
QUOTED_FIGURES = {
    ("swinir", "params"): 37e3,
    ("dlgsanet", "params"): 34e3,
    ("lamnet", "params"): 30e3,
    ("swinir", "flops"): 38e9,
    ("lamnet", "flops"): 26e9,
    ("dlgsanet", "flops"): 22e9,
}


def k_sweep(specs: Sequence[FocalSpec], C: int, G: int, H: int, W: int, dtype="float64") -> List[dict]:
    """FSA cost against K for each focal spec, counted from a freshly built mixer."""
    import numpy as np

    from .ulm import init_ulm

    rows = []
    for spec in specs:
        ulm = init_ulm(np.random.default_rng(0), C, spec, G, dtype=np.dtype(dtype).type)
        lsam = [r for r in ulm_rows("ulm", ulm, H, W, FORMULA_POLICY) if ".lsam_" in r.name and r.counted]
        k = kernel_len(spec)
        rows.append({
            "spec": str(spec),
            "K": k,
            "R": receptive_field(spec),
            "fsa_params": sum(r.params for r in lsam),
            "fsa_flops": sum(r.flops for r in lsam),
            "dense_window_flops": 2 * k * k * H * W * C,
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
