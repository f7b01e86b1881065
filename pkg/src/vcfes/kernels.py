"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``VCFES_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("VCFES_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

space_distances = _impl.space_distances
fuse = _impl.fuse
pairwise_distances = _impl.pairwise_distances
batch_hard = _impl.batch_hard

DEGENERATE_DISTANCE = _kernels_py.DEGENERATE_DISTANCE


def thread_count():
    """Worker cap from ``VCFES_THREADS``, defaulting to the core count."""
    raw = os.environ.get("VCFES_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
