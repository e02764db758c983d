"""Backend selection for the SEM/SPA aggregation kernels.

The Cython extension is used when it was built; otherwise (or when
``FBCLIP_PURE_PYTHON=1`` is set) the numpy implementation is used.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["compiled"] = _compiled

if _compiled is not None and os.environ.get("FBCLIP_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "compiled"
else:
    BACKEND = "python"
logger.debug("fbclip kernels: %s backend", BACKEND)


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    name = BACKEND if name is None else name
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def sem_aggregate(tokens, cls, mask, alpha, backend=None):
    return get_backend(backend).sem_aggregate(tokens, cls, mask, float(alpha))


def spa_aggregate(tokens, cls, mask, side, kernel, eps=1e-8, backend=None):
    return get_backend(backend).spa_aggregate(tokens, cls, mask, int(side), int(kernel), float(eps))
