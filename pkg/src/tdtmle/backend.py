"""Kernel backend selection.

The compiled extension is preferred when importable; set
``TDTMLE_KERNELS=numpy`` or ``TDTMLE_KERNELS=compiled`` to force a choice
(forcing ``compiled`` raises if the extension was not built).
"""

import os


def _select():
    choice = os.environ.get("TDTMLE_KERNELS", "auto")
    if choice not in ("auto", "compiled", "numpy"):
        raise ValueError(f"TDTMLE_KERNELS must be auto|compiled|numpy, got {choice!r}")
    if choice in ("auto", "compiled"):
        try:
            from tdtmle import _ckernels

            return _ckernels
        except ImportError:
            if choice == "compiled":
                raise ImportError(
                    "TDTMLE_KERNELS=compiled but the tdtmle._ckernels extension "
                    "is not built; reinstall with a working C toolchain"
                ) from None
    from tdtmle import _kernels_np

    return _kernels_np


kernels = _select()
backend_name = kernels.NAME
