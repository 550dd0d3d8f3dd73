"""Kernel backend selection.

The numba backend is used when numba imports and ``KFLAYERS_BACKEND`` is not
set to ``numpy``.  Both backends expose the same functions; tests and the
benchmark can request either one explicitly through :func:`get_backend`.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _numpy

ENV_FLAG = "KFLAYERS_BACKEND"

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_BACKENDS: dict[str, ModuleType | None] = {"numpy": _numpy, "numba": _numba}


def available_backends() -> list[str]:
    return [k for k, v in _BACKENDS.items() if v is not None]


def default_backend_name() -> str:
    want = os.environ.get(ENV_FLAG, "numba").strip().lower()
    if want not in _BACKENDS:
        raise ValueError(f"{ENV_FLAG} must be one of {sorted(_BACKENDS)}, got {want!r}")
    if _BACKENDS[want] is None:
        return "numpy"
    return want


def get_backend(name: str | None = None) -> ModuleType:
    name = default_backend_name() if name is None else name
    mod = _BACKENDS.get(name)
    if mod is None:
        raise ValueError(f"kernel backend {name!r} is not available")
    return mod


def _conform(x, shape, dt):
    # skip the broadcast/copy when the array already fits (saves ~30us per call)
    if (isinstance(x, np.ndarray) and x.shape == shape and x.dtype == dt
            and x.flags.c_contiguous):
        return x
    return np.ascontiguousarray(np.broadcast_to(x, shape), dtype=dt)


def _prep(a, b, q, u, w, r, mask, x0, p0):
    dt = u.dtype
    K, C = u.shape
    kc, c = (K, C), (C,)
    return (_conform(a, c, dt), _conform(b, c, dt), _conform(q, kc, dt), np.ascontiguousarray(u),
            _conform(w, kc, dt), _conform(r, kc, dt), _conform(mask, kc, np.bool_),
            _conform(x0, c, dt), _conform(p0, c, dt))


def kf_forward(a, b, q, u, w, r, mask, x0, p0, update=True, parallel=True, backend=None):
    """Posterior means and variances, each ``(K, C)``.

    ``parallel`` selects the two-pass tree scan; otherwise the step-by-step
    recurrence.  Without ``update`` the filter only predicts (``w``, ``r`` unused).
    """
    mod = get_backend(backend)
    args = _prep(a, b, q, u, w, r, mask, x0, p0)
    fn = mod.kf_forward_parallel if parallel else mod.kf_forward_sequential
    return fn(*args, bool(update))


def kf_backward(a, b, q, u, w, r, mask, X, P, gX, gP, x0, p0, update=True, backend=None):
    mod = get_backend(backend)
    a, b, q, u, w, r, mask, x0, p0 = _prep(a, b, q, u, w, r, mask, x0, p0)
    dt = u.dtype
    X, P, gX, gP = (np.ascontiguousarray(v, dtype=dt) for v in (X, P, gX, gP))
    return mod.kf_backward(a, b, q, u, w, r, mask, X, P, gX, gP, x0, p0, bool(update))
