"""Kernel backend selection.

The compiled Cython module is used when it was built and imports cleanly;
otherwise, or when ``POISONFORGE_PURE=1`` is set, the numpy fallback is used.
Both expose the same functions with the same in-place semantics.
"""
from __future__ import annotations

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_FUNCS = ("bpr_sgd_epoch", "fpmc_sgd_epoch", "bpr_loss_grad", "fpmc_loss_grad", "bpr_hvp", "fpmc_hvp")


def _load():
    if os.environ.get("POISONFORGE_PURE", "") not in ("", "0"):
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        return _pykernels, "python"
    return _ckernels, "cython"


_impl, BACKEND = _load()

bpr_sgd_epoch = _impl.bpr_sgd_epoch
fpmc_sgd_epoch = _impl.fpmc_sgd_epoch
bpr_loss_grad = _impl.bpr_loss_grad
fpmc_loss_grad = _impl.fpmc_loss_grad
bpr_hvp = _impl.bpr_hvp
fpmc_hvp = _impl.fpmc_hvp


def backend_module(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(name)
