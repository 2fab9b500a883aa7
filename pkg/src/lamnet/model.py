"""LAMNet assembly, deterministic initialization and the binary checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .dgfn import DgfnParams, dgfn_forward, init_dgfn
from .fsa import FocalSpec, kernel_len, receptive_field
from .nn import ConvParams, NormParams, conv2d, init_conv, init_norm, layer_norm, named_tensors, pixel_shuffle
from .tensor import ShapeError, Tensor
from .ulm import UlmParams, init_ulm, ulm_forward

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class LamNetConfig:
    scale: int = 2
    channels: int = 64
    num_blocks: int = 4
    pairs_per_block: int = 4
    groups: int = 4
    focal: FocalSpec = FocalSpec()
    csm_hidden_ratio: float = 1.0
    weights_softmax: bool = False
    bias: bool = False
    use_iem: bool = True
    dtype: str = "float32"
    # output layers of each residual branch and the reconstruction head start scaled down
    branch_init_gain: float = 0.1
    recon_init_gain: float = 0.1

    def __post_init__(self):
        if isinstance(self.focal, dict):
            object.__setattr__(self, "focal", FocalSpec(**self.focal))
        self.validate()

    def validate(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.groups < 1 or self.channels % (2 * self.groups):
            raise ValueError(
                f"channels ({self.channels}) must be divisible by 2*groups ({2 * self.groups})"
            )
        if self.num_blocks < 0 or self.pairs_per_block < 0:
            raise ValueError("num_blocks and pairs_per_block must be non-negative")
        if receptive_field(self.focal) % 2 == 0:
            raise ValueError("focal receptive field must be odd")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.csm_hidden_ratio <= 0:
            raise ValueError("csm_hidden_ratio must be positive")
        if self.branch_init_gain < 0 or self.recon_init_gain < 0:
            raise ValueError("init gains must be non-negative")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def kernel_len(self) -> int:
        return kernel_len(self.focal)

    @classmethod
    def large(cls, **overrides) -> "LamNetConfig":
        return cls(**{"num_blocks": 5, "pairs_per_block": 6, "channels": 64, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["focal"] = {"strides": list(self.focal.strides), "steps": list(self.focal.steps)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LamNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "LamNetConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class PairParams:
    norm1: NormParams
    ulm: UlmParams
    norm2: NormParams
    dgfn: DgfnParams


@dataclass
class BlockParams:
    pairs: List[PairParams] = field(default_factory=list)


@dataclass
class LamNetParams:
    shallow: ConvParams
    blocks: List[BlockParams]
    trunk: ConvParams
    recon: ConvParams


class LamNet:
    def __init__(self, config: LamNetConfig, params: LamNetParams):
        self.config = config
        self.params = params

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return named_tensors(self.params)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def shallow(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params.shallow)

    def deep(self, x_shallow: Tensor) -> Tensor:
        feats = x_shallow
        for block in self.params.blocks:
            feats = lam_block(feats, block, self.config.use_iem)
        return T.add(conv2d(feats, self.params.trunk), x_shallow)

    def reconstruct(self, x_deep: Tensor) -> Tensor:
        return pixel_shuffle(conv2d(x_deep, self.params.recon), self.config.scale)

    def forward(self, i_lr: Tensor) -> Tensor:
        if i_lr.shape[1] != 3:
            raise ShapeError(f"LAMNet takes 3-channel RGB input, got {i_lr.shape[1]} channels")
        if i_lr.dtype != self.config.np_dtype and not i_lr.requires_grad:
            i_lr = Tensor(i_lr.data.astype(self.config.np_dtype))
        return self.reconstruct(self.deep(self.shallow(i_lr)))

    __call__ = forward


def lam_block(x: Tensor, block: BlockParams, use_iem: bool = True) -> Tensor:
    """Pre-norm residual (ULM, DGFN) pairs plus the block-level skip."""
    y = x
    for pair in block.pairs:
        y = T.add(y, ulm_forward(layer_norm(y, pair.norm1), pair.ulm, use_iem))
        y = T.add(y, dgfn_forward(layer_norm(y, pair.norm2), pair.dgfn))
    return T.add(y, x)


def build(config: LamNetConfig, seed: int = 0) -> LamNet:
    """Deterministic He-uniform initialization; norms start at gamma=1, beta=0.

    The last projection of every residual branch and the reconstruction conv are
    then multiplied by the configured gains so an untrained network starts close
    to its skip paths.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    c, dt, bias = config.channels, config.np_dtype, config.bias
    shallow = init_conv(rng, 3, c, (3, 3), bias=bias, dtype=dt)
    blocks = []
    for _ in range(config.num_blocks):
        pairs = []
        for _ in range(config.pairs_per_block):
            pairs.append(PairParams(
                norm1=init_norm(c, dt),
                ulm=init_ulm(rng, c, config.focal, config.groups, config.csm_hidden_ratio,
                             config.weights_softmax, bias, dt),
                norm2=init_norm(c, dt),
                dgfn=init_dgfn(rng, c, bias, dt),
            ))
        blocks.append(BlockParams(pairs))
    trunk = init_conv(rng, c, c, (3, 3), bias=bias, dtype=dt)
    recon = init_conv(rng, c, 3 * config.scale ** 2, (3, 3), bias=bias, dtype=dt)
    for block in blocks:
        for pair in block.pairs:
            for p in (pair.ulm.out_proj, pair.dgfn.sqz):
                p.weight.data *= dt(config.branch_init_gain)
    recon.weight.data *= dt(config.recon_init_gain)
    return LamNet(config, LamNetParams(shallow, blocks, trunk, recon))


def transfer_weights(src: LamNet, dst: LamNet, skip_prefix: str = "recon.") -> List[str]:
    """Copy every parameter except the reconstruction head; returns the copied names."""
    src_state = dict(src.named_parameters())
    copied = []
    for name, t in dst.named_parameters():
        if name.startswith(skip_prefix):
            continue
        s = src_state.get(name)
        if s is None or s.shape != t.shape:
            raise ShapeError(f"cannot transfer {name}: source {None if s is None else s.shape}, target {t.shape}")
        t.data = s.data.astype(t.dtype, copy=True)
        copied.append(name)
    return copied


# ---------------------------------------------------------------------------
# checkpoint format (all integers little-endian):
#   8s magic | u16 version | u32 len + UTF-8 JSON config | u32 tensor count
#   per tensor: u16 len + UTF-8 name | u8 dtype code | 4 x u32 dims | raw payload

MAGIC = b"LAMNETCK"
VERSION = 1
_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: LamNet) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    named = list(model.named_parameters())
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, t in named:
        raw = name.encode()
        arr = t.data.astype(t.dtype.newbyteorder("<"), copy=False)
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<B", _CODE[arr.dtype]),
                struct.pack("<4I", *arr.shape), np.ascontiguousarray(arr).tobytes()]
    return b"".join(out)


def save(model: LamNet, path) -> None:
    data = checkpoint_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if have < n:
            raise CheckpointError(
                f"truncated checkpoint at offset {self.pos} reading {what}: "
                f"need {n} bytes, {have} available ({n - have} missing)"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(buf: bytes) -> LamNet:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {magic!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset {len(MAGIC)} (expected {VERSION})")
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        config = LamNetConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid config record at offset {cfg_at}: {exc}") from exc
    model = build(config, seed=0)
    expected = dict(model.named_parameters())
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    seen = set()
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        (code,) = r.unpack("<B", f"dtype of {name}")
        dims = r.unpack("<4I", f"shape of {name}")
        if code not in _FROM_CODE:
            raise CheckpointError(f"unknown dtype code {code} for {name} at offset {at}")
        dt = _FROM_CODE[code]
        target = expected.get(name)
        if target is None or name in seen:
            raise CheckpointError(f"unexpected tensor {name!r} at offset {at}")
        if tuple(dims) != target.shape or dt != target.dtype:
            raise CheckpointError(
                f"tensor {name!r} at offset {at} is {dims}/{dt}, config expects {target.shape}/{target.dtype}"
            )
        payload = r.take(int(np.prod(dims)) * dt.itemsize, f"payload of {name}")
        target.data = np.frombuffer(payload, dtype=dt).reshape(dims).astype(target.dtype)
        seen.add(name)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return model


def load(path) -> LamNet:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
