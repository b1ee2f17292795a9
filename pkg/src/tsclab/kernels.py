"""Backend selection for the numeric kernels.

The compiled module ``tsclab._ckernels`` is used when it imports; otherwise
the NumPy implementation in ``tsclab._pykernels`` is used.  Set
``TSCLAB_BACKEND=python`` to force the fallback, or ``TSCLAB_BACKEND=c`` to
fail loudly when the extension is missing.
"""

from __future__ import annotations

import importlib
import os

from . import _pykernels

_choice = os.environ.get("TSCLAB_BACKEND", "auto").strip().lower()

if _choice == "python":
    backend = _pykernels
elif _choice in ("c", "auto"):
    try:
        backend = importlib.import_module("tsclab._ckernels")
    except ImportError:
        if _choice == "c":
            raise
        backend = _pykernels
else:
    raise ImportError(f"TSCLAB_BACKEND must be auto, c or python, not {_choice!r}")

BACKEND_NAME = "c" if backend is not _pykernels else "python"


def available_backends():
    found = {"python": _pykernels}
    try:
        found["c"] = importlib.import_module("tsclab._ckernels")
    except ImportError:
        pass
    return found


forward = backend.forward
embed = backend.embed
loss_grad = backend.loss_grad
vjp = backend.vjp
adam_update = backend.adam_update
