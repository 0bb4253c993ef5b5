"""Attention kernel backends.

The compiled extension is preferred when importable; the numpy reference is
the fallback. ``ZIGZAGLAB_BACKEND`` (``auto``, ``python``, ``compiled``)
overrides the choice at import time; ``use_backend`` overrides it at runtime
for benchmarks and tests.
"""

import os

from ..errors import ConfigError
from . import pyref

try:
    from . import _core
except ImportError:
    _core = None


def available_backends():
    return ("python",) if _core is None else ("python", "compiled")


def get_backend(name):
    if name in (None, "", "auto"):
        return _core if _core is not None else pyref
    if name in ("python", "numpy"):
        return pyref
    if name in ("compiled", "cython"):
        if _core is None:
            raise ConfigError("compiled kernels requested but the extension is not built")
        return _core
    raise ConfigError(f"unknown kernel backend {name!r}")


ACTIVE = get_backend(os.environ.get("ZIGZAGLAB_BACKEND", "auto"))


def use_backend(name):
    global ACTIVE
    ACTIVE = get_backend(name)
    return ACTIVE


def backend_name():
    return "python" if ACTIVE is pyref else "compiled"
