"""Kernel selection: compiled extension when available, numpy fallback otherwise.

Set PURPLE_PURE_PYTHON=1 to force the fallback (used by the parity tests and
the benchmark).  `IMPLEMENTATION` reports which one is active.
"""

import os

if os.environ.get("PURPLE_PURE_PYTHON"):
    from . import _pl_py as _impl
else:
    try:
        from . import _plc as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pl_py as _impl

IMPLEMENTATION = _impl.IMPLEMENTATION

perm_count = _impl.perm_count
enumerate_perms = _impl.enumerate_perms
profile_probs = _impl.profile_probs
profile_logprobs = _impl.profile_logprobs
sample_profiles = _impl.sample_profiles
synthetic_utilities = _impl.synthetic_utilities


def available_implementations():
    """Names of the kernel implementations importable in this environment."""
    names = ["python"]
    try:
        from . import _plc  # noqa: F401
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names
