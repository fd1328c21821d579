"""Particle assembly kernels.

The compiled extension is used when it imports; otherwise, or when
``MPMTO_BACKEND=numpy`` is set, the vectorised NumPy path is selected.
Both expose ``assemble`` with identical semantics.
"""
import os

from . import _numpy_backend

try:
    from . import _assembly as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"numpy": _numpy_backend}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def available():
    return sorted(_BACKENDS)


def get_backend(name=None):
    if name is None:
        name = os.environ.get("MPMTO_BACKEND")
    if name is None:
        return _BACKENDS.get("cython", _numpy_backend)
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}") from None


backend = get_backend()
BACKEND = backend.NAME
stencil_offsets = _numpy_backend.stencil_offsets
piola_tangent = _numpy_backend.piola_tangent
piola_from_kirchhoff = _numpy_backend.piola_from_kirchhoff
