"""Backend selection for the SGD kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``FEDSIM_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

ACT_TANH = _fallback.ACT_TANH
ACT_RELU = _fallback.ACT_RELU

_compiled = None
if not os.environ.get("FEDSIM_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback

logreg_sgd_epoch = _impl.logreg_sgd_epoch
mlp_sgd_epoch = _impl.mlp_sgd_epoch


def backends():
    """Available kernel implementations keyed by name (for tests and benchmarks)."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
