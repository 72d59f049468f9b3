"""Kernel selection.

The compiled kernel is used when it was built and ``STACKSAFE_PURE`` is not
set; otherwise the interpreted one. Both expose ``step`` and ``run``.
"""
import os

from stacksafe import _pykernel as pykernel

ckernel = None
if not os.environ.get("STACKSAFE_PURE"):
    try:
        from stacksafe import _ckernel as ckernel
    except ImportError:  # extension not built
        ckernel = None

kernel = ckernel if ckernel is not None else pykernel
BACKEND = "compiled" if ckernel is not None else "python"


def use(backend: str) -> None:
    """Switch the active kernel at runtime (``"compiled"`` or ``"python"``)."""
    global kernel, BACKEND
    if backend == "compiled":
        if ckernel is None:
            raise RuntimeError("compiled kernel is not available")
        kernel = ckernel
    elif backend == "python":
        kernel = pykernel
    else:
        raise ValueError(backend)
    BACKEND = backend
