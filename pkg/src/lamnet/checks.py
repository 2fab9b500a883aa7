"""Float64 finite-difference suites for every differentiable operator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor as T
from .dgfn import dgfn_forward, init_dgfn
from .fsa import FocalSpec, fsa_apply, focal_agents, gen_dynamic_weights, init_lsam, lsam_forward
from .model import LamNetConfig, build
from .nn import conv2d, dwconv1d, init_conv, layer_norm_channels, named_tensors, pixel_shuffle
from .tensor import Tensor
from .trainer import l1_loss
from .ulm import csm_forward, iem_exchange, init_ulm, ulm_forward

DEFAULT_TOL = 1e-4
EPSILON = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    where: object
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, shape, margin=0.1):
    # keeps kinks (ReLU, |x|) out of reach of the finite-difference step
    v = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(v)


def _tag(shape) -> str:
    return "x".join(map(str, shape))


def _params(obj) -> List[Tensor]:
    return [t for _, t in named_tensors(obj)]


def _tensor_cases(rng):
    shapes = [(1, 1, 2, 2), (2, 3, 2, 3), (1, 4, 3, 1)]
    cases = []
    for s in shapes:
        a, b = _rand(rng, s), _rand(rng, s)
        tag = _tag(s)
        cases += [
            (f"add[{tag}]", lambda a, b: T.add(a, b), [a, b]),
            (f"sub[{tag}]", lambda a, b: T.sub(a, b), [a, b]),
            (f"mul[{tag}]", lambda a, b: T.mul(a, b), [a, b]),
            (f"scale[{tag}]", lambda a: T.scale(a, -2.5), [a]),
            (f"gelu[{tag}]", lambda a: T.gelu(a), [_rand(rng, s, -3, 3)]),
            (f"relu[{tag}]", lambda a: T.relu(a), [_away_from_zero(rng, s)]),
            (f"sigmoid[{tag}]", lambda a: T.sigmoid(a), [_rand(rng, s, -4, 4)]),
            (f"sum[{tag}]", lambda a: T.sum(a, "CW"), [a]),
            (f"mean[{tag}]", lambda a: T.mean(a, "NH"), [a]),
            (f"expand[{tag}]", lambda a, s=s: T.expand(T.sum(a, "HW"), s), [a]),
            (f"concat_split[{tag}]", lambda a, b: T.concat(T.split_channels(T.concat([a, b]), 2)[::-1]), [a, b]),
        ]
    return cases


def _nn_cases(rng):
    cases = []
    for s, k, g in [((1, 2, 3, 3), 3, 1), ((2, 4, 4, 5), 3, 2), ((1, 3, 5, 2), 1, 1)]:
        c = s[1]
        p = init_conv(rng, c, 2 * c, (k, k), groups=g, bias=True, dtype=np.float64)
        p.bias.data[...] = rng.uniform(-1, 1, p.bias.shape)
        cases.append((f"conv2d[{_tag(s)},k{k},g{g}]", lambda x, w, b, p=p: conv2d(x, p), [_rand(rng, s), p.weight, p.bias]))
        dw = init_conv(rng, c, c, (3, 3), groups=c, dtype=np.float64)
        cases.append((f"dwconv3x3[{_tag(s)}]", lambda x, w, p=dw: conv2d(x, p), [_rand(rng, s), dw.weight]))
        for axis in "HW":
            d1 = init_conv(rng, c, c, (1, 5) if axis == "W" else (5, 1), groups=c, dtype=np.float64)
            cases.append((f"dwconv1d[{_tag(s)},{axis}]", lambda x, w, p=d1, a=axis: dwconv1d(x, p, a), [_rand(rng, s), d1.weight]))
    # two channels normalize to +-1 whatever the input, leaving a gradient that is pure eps noise
    for s in [(1, 3, 3, 3), (2, 4, 4, 5), (1, 6, 2, 2)]:
        gamma, beta = _rand(rng, (1, s[1], 1, 1)), _rand(rng, (1, s[1], 1, 1))
        cases.append((f"layer_norm[{_tag(s)}]", lambda x, gm, bt: layer_norm_channels(x, gm, bt), [_rand(rng, s, -2, 2), gamma, beta]))
    for s, r in [((1, 4, 2, 2), 2), ((2, 9, 1, 2), 3), ((1, 8, 3, 3), 2)]:
        cases.append((f"pixel_shuffle[{_tag(s)},r{r}]", lambda x, r=r: pixel_shuffle(x, r), [_rand(rng, s)]))
    for s in [(1, 2, 3, 3), (2, 3, 2, 4), (1, 1, 4, 4)]:
        pred, target = _rand(rng, s), _rand(rng, s)
        target.data = pred.data - _away_from_zero(rng, s).data  # keep |pred - target| off its kink
        cases.append((f"l1_loss[{_tag(s)}]", lambda p, t: l1_loss(p, t), [pred, target]))
    return cases


def _fsa_cases(rng):
    cases = []
    specs = [FocalSpec((1,), (1,)), FocalSpec((1, 2), (1, 1)), FocalSpec((1, 2, 4), (3, 2, 1))]
    for s, spec in zip([(1, 2, 5, 6), (2, 4, 6, 4), (1, 4, 7, 7)], specs):
        for axis in "HW":
            cases.append((f"focal_agents[{_tag(s)},{spec},{axis}]", lambda x, a=axis, sp=spec: focal_agents(x, a, sp), [_rand(rng, s)]))
        g = 2
        k = 1 + 2 * sum(spec.steps)
        agents = _rand(rng, (s[0], s[1] * k, s[2], s[3]))
        weights = _rand(rng, (s[0], g * k, s[2], s[3]))
        cases.append((f"fsa_apply[{_tag(s)},K{k}]", lambda a, w: fsa_apply(a, w, 2), [agents, weights]))
        for softmax in (False, True):
            p = init_lsam(rng, s[1], spec, g, "W", dtype=np.float64)
            cases.append((f"gen_dynamic_weights[{_tag(s)},softmax={softmax}]",
                          lambda x, *_, p=p, sm=softmax: gen_dynamic_weights(x, "W", p, sm),
                          [_rand(rng, s)] + _params(p)))
        ph = init_lsam(rng, s[1], spec, g, "W", dtype=np.float64)
        pv = init_lsam(rng, s[1], spec, g, "H", dtype=np.float64)
        cases.append((f"lsam_forward[{_tag(s)},{spec}]",
                      lambda x, *_, ph=ph, pv=pv, sp=spec: lsam_forward(x, ph, pv, sp),
                      [_rand(rng, s)] + _params(ph) + _params(pv)))
    return cases


def _ulm_cases(rng):
    cases = []
    for s in [(1, 2, 3, 3), (2, 4, 2, 5), (1, 3, 4, 4)]:
        cases.append((f"iem_exchange[{_tag(s)}]", lambda a, b: T.concat(list(iem_exchange(a, b))), [_rand(rng, s), _rand(rng, s)]))
    for s in [(1, 4, 3, 3), (1, 8, 3, 3)]:
        p = init_ulm(rng, 2 * s[1], FocalSpec(), 2, dtype=np.float64)
        x = _rand(rng, s)
        cases.append((f"csm_forward[{_tag(s)}]", lambda x, *_, p=p: csm_forward(x, p.sqz, p.exp), [x, p.sqz.weight, p.exp.weight]))
    p = init_ulm(rng, 8, FocalSpec(), 4, dtype=np.float64)
    cases.append(("ulm_forward[1x8x6x6]", lambda x, *_, p=p: ulm_forward(x, p), [_rand(rng, (1, 8, 6, 6))] + _params(p)))
    p = init_ulm(rng, 8, FocalSpec((1, 2), (1, 1)), 2, dtype=np.float64)
    cases.append(("ulm_forward[2x8x5x4]", lambda x, *_, p=p: ulm_forward(x, p), [_rand(rng, (2, 8, 5, 4))] + _params(p)))
    return cases


def _dgfn_cases(rng):
    cases = []
    for s in [(1, 4, 3, 3), (2, 8, 4, 4), (1, 6, 5, 2)]:
        p = init_dgfn(rng, s[1], dtype=np.float64)
        cases.append((f"dgfn_forward[{_tag(s)}]", lambda x, *_, p=p: dgfn_forward(x, p), [_rand(rng, s)] + _params(p)))
    return cases


def _model_cases(rng):
    # unit gains: the shrunken default init leaves some gradients near 1e-8, where the
    # relative error measures central-difference roundoff instead of the backward pass
    cfg = LamNetConfig(channels=8, num_blocks=1, pairs_per_block=1, groups=2, dtype="float64",
                       branch_init_gain=1.0, recon_init_gain=1.0)
    model = build(cfg, seed=int(rng.integers(0, 2**31)))
    x = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
    target = Tensor(rng.uniform(0, 1, size=(1, 3, 16, 16)))

    def loss(x, *_):
        return l1_loss(model(x), target)

    return [("model_l1[C8,m1,n1,8x8]", loss, [x] + model.parameters())]


SUITES: Dict[str, Callable] = {
    "tensor": _tensor_cases,
    "nn": _nn_cases,
    "fsa": _fsa_cases,
    "ulm": _ulm_cases,
    "dgfn": _dgfn_cases,
    "model": _model_cases,
}


def run_suite(module: str = "all", seed: int = 0, tol: float = DEFAULT_TOL,
              epsilon: float = EPSILON) -> List[CheckResult]:
    names = list(SUITES) if module == "all" else [module]
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck module {name!r}; choose from all, {', '.join(SUITES)}")
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        for case_name, f, inputs in SUITES[name](rng):
            err, where = T.grad_check(f, inputs, epsilon, return_worst=True)
            # commas would break the CSV report
            results.append(CheckResult(f"{name}.{case_name}".replace(",", ";"), err, where, tol))
    return results


def check_one(case: Tuple[str, Callable, list], tol: float = DEFAULT_TOL) -> CheckResult:
    name, f, inputs = case
    err, where = T.grad_check(f, inputs, EPSILON, return_worst=True)
    return CheckResult(name, err, where, tol)
