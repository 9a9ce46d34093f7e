"""Backend selection for the metric hot loops.

The compiled ``_ckernels`` module is preferred; set ``R2P_PURE_PYTHON=1``
(before import) to force the numpy fallback.  ``BACKEND`` names the one in use.
"""
import os

from . import _pykernels

if os.environ.get("R2P_PURE_PYTHON", "") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND: str = _impl.BACKEND

nearest_neighbors = _impl.nearest_neighbors
pairwise_distances = _impl.pairwise_distances
hungarian = _impl.hungarian
auction_phase = _impl.auction_phase


def available_backends():
    """Map backend name -> module for every backend importable here (for benchmarks and tests)."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
