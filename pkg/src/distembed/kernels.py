"""Hot-loop backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
twin. Set ``DISTEMBED_KERNELS=python`` to force the fallback.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("DISTEMBED_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        logger.warning("compiled kernels unavailable, using the pure-Python fallback")

sgd_local_pass = _impl.sgd_local_pass
sgd_remote_pass = _impl.sgd_remote_pass
walk_local = _impl.walk_local


def backends() -> dict:
    """All importable backends by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return out
