"""LAMNet: linear adaptive mixer network for lightweight super-resolution."""

import os as _os

if "LAMNET_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["LAMNET_THREADS"])

from .fsa import FocalSpec, kernel_len, receptive_field  # noqa: E402
from .model import LamNet, LamNetConfig, build, load, save  # noqa: E402
from .tensor import Tensor, backward, grad_check, no_grad  # noqa: E402

__all__ = [
    "FocalSpec",
    "LamNet",
    "LamNetConfig",
    "Tensor",
    "backward",
    "build",
    "grad_check",
    "kernel_len",
    "load",
    "no_grad",
    "receptive_field",
    "save",
]
