"""Kernel backend selection.

The compiled extension (``localspike._ckernels``) is preferred when it
imported cleanly; otherwise the NumPy reference kernels are used.  The
choice can be forced with the environment variable ``LOCALSPIKE_KERNELS``
(``"c"`` or ``"py"``) or at runtime with :func:`set_backend` (used by the
benchmark and the backend-equivalence tests).
"""

import logging
import os

from . import _pykernels

logger = logging.getLogger(__name__)

_BACKENDS = {"py": _pykernels}

try:
    from . import _ckernels

    _BACKENDS["c"] = _ckernels
except ImportError:  # extension not built; NumPy fallback stays active
    _ckernels = None

kernels = _BACKENDS.get("c", _pykernels)

_forced = os.environ.get("LOCALSPIKE_KERNELS", "").strip().lower()
if _forced:
    if _forced in _BACKENDS:
        kernels = _BACKENDS[_forced]
    else:
        logger.warning(
            "LOCALSPIKE_KERNELS=%r not available (have: %s); using %s",
            _forced,
            ", ".join(sorted(_BACKENDS)),
            kernels.NAME,
        )


def backend_name() -> str:
    """Name of the active kernel backend ("cython" or "numpy")."""
    return kernels.NAME


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    """Return a kernel module by short name ("c" or "py")."""
    if name not in _BACKENDS:
        raise KeyError(f"unknown kernel backend {name!r}; have {available_backends()}")
    return _BACKENDS[name]


def set_backend(name: str) -> None:
    """Switch the active backend in place (affects all engine modules)."""
    global kernels
    kernels = get_backend(name)
