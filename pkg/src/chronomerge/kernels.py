"""Kernel backend selection.

Prefers the compiled extension (chronomerge._ckernels) and falls back to
the pure-NumPy implementation. Set CHRONOMERGE_BACKEND=python to force the
fallback or =cython to require the extension.
"""

from __future__ import annotations

import os

from . import _pykernels

_VALID = ("auto", "python", "cython")
_requested = os.environ.get("CHRONOMERGE_BACKEND", "auto").strip().lower() or "auto"
if _requested not in _VALID:
    raise ValueError(
        f"CHRONOMERGE_BACKEND={_requested!r} not recognized; expected one of {_VALID}"
    )

_impl = None
if _requested in ("auto", "cython"):
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "CHRONOMERGE_BACKEND=cython but the compiled extension is not built; "
                "reinstall with a C compiler or unset the variable"
            ) from None
if _impl is None:
    _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

weighted_sum = _impl.weighted_sum
ties_combine = _impl.ties_combine
magmax_combine = _impl.magmax_combine
mlp_train = _impl.mlp_train
# The forward pass used for evaluation is always the NumPy one so metric
# computation is identical no matter which training backend is active.
mlp_logits = _pykernels.mlp_logits


def backend_name() -> str:
    return BACKEND


def load_backend(name: str):
    """Return a specific backend module (for parity tests and benchmarks),
    or None if it is unavailable."""
    if name == "python":
        return _pykernels
    if name == "cython":
        try:
            from . import _ckernels  # type: ignore[attr-defined]

            return _ckernels
        except ImportError:
            return None
    raise ValueError(f"unknown backend {name!r}")
