"""Kernel backend selection.

The compiled Cython core is preferred when importable; a pure-numpy
fallback provides the same contract (bit-identical outputs). Set
QB_KERNELS=python or QB_KERNELS=compiled to force one; forcing the
compiled backend when it is unavailable raises at import.
"""

from __future__ import annotations

import os

from . import _pykernels

_choice = os.environ.get("QB_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "python", "compiled"):
    raise ImportError(f"QB_KERNELS must be auto|python|compiled, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise ImportError("QB_KERNELS=compiled but the extension is not built")
if _impl is None:
    _impl = _pykernels

BACKEND: str = _impl.BACKEND

fake_quant_grouped = _impl.fake_quant_grouped
minmax_grouped = _impl.minmax_grouped
integer_matmul = _impl.integer_matmul


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names


def get_backend(name: str):
    """Fetch a backend module by name (for cross-validation and benchmarks)."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
