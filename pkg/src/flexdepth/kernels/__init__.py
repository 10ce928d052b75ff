"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; otherwise the numpy
backend is used. ``FLEXDEPTH_KERNELS=numpy`` or ``=compiled`` forces a
backend at import time (forcing ``compiled`` raises if the extension is
missing), and :func:`use_backend` switches at runtime, which the parity
tests and the benchmark rely on.

Kernel contract: 2D float64 C-contiguous arrays, rows independent. See
``numpy_backend`` for the reference semantics.
"""

from __future__ import annotations

import os

from flexdepth.kernels import numpy_backend

_KERNEL_NAMES = (
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_forward",
    "softmax_backward",
    "cross_entropy_forward",
    "cross_entropy_backward",
)

try:
    from flexdepth.kernels import _speedups
except ImportError:
    _speedups = None

backend_name = ""


def available_backends() -> tuple[str, ...]:
    return ("numpy", "compiled") if _speedups is not None else ("numpy",)


def use_backend(name: str) -> None:
    """Rebind the module-level kernel functions to the named backend."""
    global backend_name
    if name == "numpy":
        impl = numpy_backend
    elif name == "compiled":
        if _speedups is None:
            raise ImportError("compiled kernel extension is not built")
        impl = _speedups
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(impl, fn)
    backend_name = name


_forced = os.environ.get("FLEXDEPTH_KERNELS", "").strip().lower()
if _forced in ("numpy", "python"):
    use_backend("numpy")
elif _forced == "compiled":
    use_backend("compiled")
elif _forced in ("", "auto"):
    use_backend("compiled" if _speedups is not None else "numpy")
else:
    raise ValueError(f"unrecognized FLEXDEPTH_KERNELS value {_forced!r}")
