"""Pick the kernel backend once, at import.

``NVRC_PURE_PYTHON=1`` forces the pure-Python kernels even when the compiled
extension is importable.
"""

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

kernels = _pykernels
NAME = "python"

if os.environ.get("NVRC_PURE_PYTHON") != "1":
    try:
        from . import _ckernels

        kernels = _ckernels
        NAME = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        logger.info("compiled kernels unavailable, using pure-Python fallback")


def get(name=None):
    """Return a kernel module by name ('python' or 'cython'), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
