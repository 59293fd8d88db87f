"""Kernel backend selection.

Hot inner loops in :mod:`progfusion.kernels` exist twice: a numba
``@njit`` version and a pure-numpy version. ``PROGFUSION_BACKEND`` picks
which one the public names dispatch to:

    PROGFUSION_BACKEND=numba   force numba (error if numba is missing)
    PROGFUSION_BACKEND=numpy   force the pure-numpy path
    (unset)                    numba when importable, else numpy

Model math built on BLAS (matmuls inside the tensor engine) is unaffected;
only the explicit loop kernels dispatch here.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_ENV_VAR = "PROGFUSION_BACKEND"

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False

_requested = os.environ.get(_ENV_VAR, "").strip().lower()

if _requested == "":
    USE_NUMBA = HAVE_NUMBA
elif _requested == "numpy":
    USE_NUMBA = False
elif _requested == "numba":
    if not HAVE_NUMBA:
        raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
    USE_NUMBA = True
else:
    raise ConfigError(
        f"unknown {_ENV_VAR}={_requested!r}; expected 'numba' or 'numpy'"
    )


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
