"""Hot-loop kernels with a compiled core and a pure-Python fallback.

Two inner loops dominate long simulations: the sequential DC-DC
converter state machine (hundreds of thousands of switching periods)
and delay-and-sum map accumulation (pairs x pixels). Both exist twice:

* ``_native`` - Cython extension, built by ``setup.py``.
* ``_fallback`` - pure Python/NumPy, always available.

The compiled version is selected at import when present; setting the
environment variable ``SHMNET_PURE=1`` forces the fallback. Both
implementations perform identical arithmetic in identical order, so
results are bit-for-bit equal (enforced by the test suite, compared by
the benchmark under ``benchmarks/``).
"""

import os

from . import _fallback

if os.environ.get("SHMNET_PURE"):
    _impl = _fallback
else:
    try:
        from . import _native as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = "native" if _impl is not _fallback else "python"

dcdc_run = _impl.dcdc_run
das_accumulate = _impl.das_accumulate

__all__ = ["BACKEND", "dcdc_run", "das_accumulate", "_fallback"]
