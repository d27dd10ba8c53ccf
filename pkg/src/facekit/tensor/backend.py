"""Backend selection for the hot kernels.

Two interchangeable implementations exist:

  * ``numba``  - JIT-compiled loops (kernels_numba), the fast path
  * ``numpy``  - im2col / vectorized fallback (kernels_numpy)

Both accumulate in float64 and emit the input dtype, so they agree within
1e-6 on float32 data. Selection is re-read from the environment on every
dispatch so tests can flip it at runtime:

  FACEKIT_BACKEND = auto | numba | numpy   (default: auto)
  FACEKIT_THREADS = N                      (caps numba's thread pool)
"""

import os
import warnings

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only on numba-less installs
    numba = None
    NUMBA_AVAILABLE = False

_ENV_VAR = "FACEKIT_BACKEND"
_THREADS_VAR = "FACEKIT_THREADS"
_VALID = ("auto", "numba", "numpy")
_threads_applied = False


def _apply_thread_cap():
    global _threads_applied
    if _threads_applied or not NUMBA_AVAILABLE:
        return
    _threads_applied = True
    raw = os.environ.get(_THREADS_VAR)
    if not raw:
        return
    try:
        n = max(1, int(raw))
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ValueError, RuntimeError) as exc:
        warnings.warn(f"ignoring {_THREADS_VAR}={raw!r}: {exc}")


def backend_name():
    """Resolved backend for the current environment: 'numba' or 'numpy'."""
    raw = os.environ.get(_ENV_VAR, "auto").strip().lower() or "auto"
    if raw not in _VALID:
        raise ValueError(f"{_ENV_VAR} must be one of {_VALID}, got {raw!r}")
    if raw == "auto":
        return "numba" if NUMBA_AVAILABLE else "numpy"
    if raw == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("FACEKIT_BACKEND=numba but numba is not importable")
    return raw


def use_numba():
    if backend_name() == "numba":
        _apply_thread_cap()
        return True
    return False
