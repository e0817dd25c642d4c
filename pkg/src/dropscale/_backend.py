"""Kernel backend selection: compiled gray-code extension when available,
pure-numpy fallback otherwise.  Set ``DROPSCALE_PURE=1`` to force the
fallback (useful for the kernel benchmark and cross-checks).
"""

import os

if os.environ.get("DROPSCALE_PURE", "") not in ("", "0"):
    from . import _kernels_py as kernels

    BACKEND = "pure"
else:
    try:
        from . import _kernels as kernels  # compiled extension

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as kernels

        BACKEND = "pure"


def backend_name() -> str:
    """Which enumeration kernel is active: "compiled" or "pure"."""
    return BACKEND
