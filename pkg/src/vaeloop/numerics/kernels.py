"""Backend selection for the hot kernels.

The compiled extension is used when it was built; set ``VAELOOP_KERNELS=numpy``
to force the pure numpy fallback.  Functions missing from the compiled module
fall through to numpy individually.
"""

import os
from types import SimpleNamespace

from . import _kernels_np

_NAMES = (
    "gmm_attention_forward",
    "gmm_attention_backward",
    "conv1d_forward",
    "conv1d_backward",
    "max_pool_forward",
    "max_pool_backward",
)

try:
    from . import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _build(module):
    return SimpleNamespace(**{
        name: getattr(module, name, None) or getattr(_kernels_np, name) for name in _NAMES
    })


def available_backends():
    return ["numpy"] + (["cython"] if _kernels_c is not None else [])


def get_backend(name):
    if name == "numpy":
        return _build(_kernels_np)
    if name == "cython":
        if _kernels_c is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _build(_kernels_c)
    raise ValueError(f"unknown kernel backend {name!r}")


def set_backend(name):
    """Switch the process-wide backend; returns the previous backend name."""
    global impl, BACKEND
    previous = BACKEND
    impl = get_backend(name)
    BACKEND = name
    return previous


_requested = os.environ.get("VAELOOP_KERNELS", "").strip().lower()
if _requested in ("numpy", "python", "py"):
    BACKEND = "numpy"
elif _requested == "cython" or _kernels_c is not None:
    BACKEND = "cython"
else:
    BACKEND = "numpy"
impl = get_backend(BACKEND)
