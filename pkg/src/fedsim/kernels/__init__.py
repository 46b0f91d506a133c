"""Hot-path classifier kernels with a compiled core and a NumPy fallback.

The backend is chosen once at import: the Cython extension
(``fedsim.kernels._core``) when it is built, otherwise the pure-NumPy
reference. Set ``FEDSIM_PURE_PYTHON=1`` to force the fallback, e.g. for
benchmarking one backend against the other.
"""

from __future__ import annotations

import os

if os.environ.get("FEDSIM_PURE_PYTHON"):
    from fedsim.kernels import reference as _impl
else:
    try:
        from fedsim.kernels import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from fedsim.kernels import reference as _impl

BACKEND: str = _impl.BACKEND
logits = _impl.logits
loss_grad = _impl.loss_grad

__all__ = ["BACKEND", "logits", "loss_grad"]
