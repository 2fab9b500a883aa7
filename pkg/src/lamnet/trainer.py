"""L1 training with Adam and a milestone schedule expressed as fractions of the run."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .tensor import Function, ShapeError, Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    milestones: Tuple[float, ...] = (0.5, 0.8, 0.9, 0.95)
    total_steps: int = 1000
    batch_size: int = 16
    patch: int = 64
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {list(ms)}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")

    def milestone_steps(self) -> List[int]:
        return [int(round(m * self.total_steps)) for m in self.milestones]

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: halved once per milestone already reached."""
        passed = sum(1 for s in self.milestone_steps() if step >= s)
        return self.lr0 * 0.5 ** passed


class _L1(Function):
    def forward(self, pred, target):
        d = pred - target
        self.sign = np.sign(d)  # sign(0) = 0
        self.count = d.size
        return np.array(np.abs(d).mean(dtype=np.float64), dtype=pred.dtype).reshape(1, 1, 1, 1)

    def backward(self, g):
        d = g * self.sign / self.count
        return d, -d


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return _L1.apply(pred, target)


@dataclass
class OptimizerState:
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Tensor], state: OptimizerState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; every parameter must carry a gradient."""
    b1, b2 = betas
    for i, p in enumerate(params):
        if p.grad is None:
            raise RuntimeError(f"parameter {i} {p.shape} has no gradient; is it detached from the loss?")
    state.step += 1
    t = state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad.astype(np.float64)
        m = state.m.get(i)
        if m is None:
            m = np.zeros(p.shape)
            state.v[i] = np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    psnr: Optional[float] = None


@dataclass
class TrainLog:
    rows: List[LogRow] = field(default_factory=list)
    header: Dict[str, object] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        buf.write("step,lr,loss,psnr\n")
        for r in self.rows:
            ps = "" if r.psnr is None else repr(r.psnr)
            buf.write(f"{r.step},{r.lr!r},{r.loss!r},{ps}\n")
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    pass


def train(model: M.LamNet, dataset, tc: TrainConfig,
          callbacks: Sequence[Callable[[int, LogRow, M.LamNet], None]] = (),
          checkpoint_path=None, eval_fn: Optional[Callable[[M.LamNet], float]] = None,
          eval_every: int = 0) -> TrainLog:
    """Run ``tc.total_steps`` optimizer steps; ``dataset.batch(step)`` supplies ``(lr, hr)`` arrays."""
    params = model.parameters()
    state = OptimizerState()
    dtype = model.config.np_dtype
    tlog = TrainLog(header={
        "batch_size": getattr(dataset, "batch_size", tc.batch_size),
        "total_steps": tc.total_steps,
        "lr0": tc.lr0,
        "milestones": ";".join(str(m) for m in tc.milestone_steps()),
        "seed": tc.seed,
    })
    for step in range(tc.total_steps):
        lr_img, hr_img = dataset.batch(step)
        model.zero_grad()
        loss = l1_loss(model(Tensor(lr_img.astype(dtype, copy=False))), Tensor(hr_img.astype(dtype, copy=False)))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        backward(loss)
        lr = tc.lr_at(step)
        adam_step(params, state, lr, tc.betas, tc.eps)
        row = LogRow(step, lr, value)
        if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
            row.psnr = eval_fn(model)
        tlog.rows.append(row)
        for cb in callbacks:
            cb(step, row, model)
        if checkpoint_path and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            M.save(model, checkpoint_path)
    if checkpoint_path:
        M.save(model, checkpoint_path)
    return tlog


def init_from_x2(checkpoint_path, scale: int, seed: int = 0) -> M.LamNet:
    """Build a ``scale`` model whose weights come from a x2 checkpoint, except a fresh reconstruction head."""
    src = M.load(checkpoint_path)
    dst = M.build(src.config.replace(scale=scale), seed)
    M.transfer_weights(src, dst)
    return dst
