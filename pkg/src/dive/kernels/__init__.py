"""Hot attention kernels with a compiled fast path and a numpy fallback.

The compiled extension (``dive.kernels._fast``, Cython) implements the same
batched attention forward/backward as the numpy reference (``_ref``). Which
one is used is decided once at import time:

* ``DIVE_KERNELS=auto``  (default) - use the extension if it imported, else numpy
* ``DIVE_KERNELS=cext``  - require the extension, raise if missing
* ``DIVE_KERNELS=numpy`` - force the numpy reference

Both backends satisfy the same contract and agree to ~1e-13; they are NOT
guaranteed bit-identical to each other (summation order differs), but each is
deterministic on its own. ``dive kernel-bench`` times the two side by side.
"""

import os

from . import _ref

_requested = os.environ.get("DIVE_KERNELS", "auto")
if _requested not in ("auto", "cext", "numpy"):
    raise ValueError(f"DIVE_KERNELS must be auto|cext|numpy, got {_requested!r}")

_impl = _ref
BACKEND = "numpy"
if _requested in ("auto", "cext"):
    try:
        from . import _fast as _impl  # type: ignore[no-redef]

        BACKEND = "cext"
    except ImportError:
        if _requested == "cext":
            raise

attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward


def get_backend(name: str):
    """Return the (forward, backward) pair for an explicit backend name."""
    if name == "numpy":
        return _ref.attention_forward, _ref.attention_backward
    if name == "cext":
        from . import _fast

        return _fast.attention_forward, _fast.attention_backward
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["numpy"]
    try:
        from . import _fast  # noqa: F401

        names.append("cext")
    except ImportError:
        pass
    return names
