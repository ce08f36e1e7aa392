"""Selects between numba-jitted kernels and their pure-numpy fallbacks.

Every hot inner loop in rawscore exists twice: an ``@njit`` version in
`rawscore.kernels_numba` and a vectorized numpy version next to its call
site. The two compute identical results (covered by the cross-backend test
suite); only speed differs.

Selection:
  * env var ``RAWSCORE_BACKEND`` = ``auto`` (default) | ``numba`` | ``numpy``
  * ``auto`` uses numba when it imports cleanly, else falls back silently
  * ``numba`` raises if numba is unavailable
  * `set_backend()` overrides the env var at runtime (used by tests and
    the benchmark script)
"""

from __future__ import annotations

import os

from rawscore.errors import InvalidSpec

_VALID = ("auto", "numba", "numpy")

_requested = os.environ.get("RAWSCORE_BACKEND", "auto").lower()
if _requested not in _VALID:
    raise InvalidSpec(
        f"RAWSCORE_BACKEND must be one of {_VALID}, got {_requested!r}"
    )

_kernels = None  # cached kernels_numba module


def set_backend(name: str) -> None:
    """Override the backend choice for this process."""
    global _requested
    if name not in _VALID:
        raise InvalidSpec(f"backend must be one of {_VALID}, got {name!r}")
    _requested = name


def get_backend() -> str:
    return _requested


def numba_enabled() -> bool:
    if _requested == "numpy":
        return False
    try:
        _load_kernels()
    except ImportError:
        if _requested == "numba":
            raise
        return False
    return True


def _load_kernels():
    global _kernels
    if _kernels is None:
        from rawscore import kernels_numba

        _kernels = kernels_numba
    return _kernels


def select(numpy_impl, kernel_name: str):
    """Return the active implementation for a named hot kernel."""
    if numba_enabled():
        return getattr(_load_kernels(), kernel_name)
    return numpy_impl


def set_num_threads(n: int) -> None:
    """Bound worker threads for parallel kernels, without changing results.

    All parallel kernels write disjoint outputs, so thread count never
    affects output bytes. No-op on the numpy backend.
    """
    if n < 1:
        raise InvalidSpec(f"worker count must be >= 1, got {n}")
    if numba_enabled():
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
