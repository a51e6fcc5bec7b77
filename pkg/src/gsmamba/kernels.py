"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Set ``GSMAMBA_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available() -> list[str]:
    return sorted(_BACKENDS)


def get(name: str | None = None) -> ModuleType:
    """Kernel module by name; ``None`` picks the default backend."""
    if name is None:
        return default
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available()}") from None


def _pick_default() -> ModuleType:
    forced = os.environ.get("GSMAMBA_BACKEND")
    if forced:
        return get(forced)
    return _BACKENDS.get("cython", _pykernels)


default = _pick_default()
BACKEND = default.NAME
