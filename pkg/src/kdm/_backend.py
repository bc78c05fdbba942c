"""Select the kernel core at import time.

The compiled ``_ckernels`` extension is preferred; set ``KDM_PURE_PYTHON=1``
to force the numpy fallback (the test-suite exercises both).
"""
import os

from kdm import _pykernels

_BACKENDS = {"numpy": _pykernels}

try:
    from kdm import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("KDM_PURE_PYTHON") or _ckernels is None:
    impl = _pykernels
else:
    impl = _ckernels


def available():
    return sorted(_BACKENDS)


def get(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available()}") from None


def use(name):
    """Switch the active backend (returns the previous one's name)."""
    global impl
    prev = impl.NAME
    impl = get(name)
    return prev
