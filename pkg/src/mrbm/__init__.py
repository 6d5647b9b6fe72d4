"""Metropolis and reflected Brownian motion on constrained manifolds, with diffusion models built on them.

Submodules are imported on demand. Setting ``MRBM_THREADS`` before the first
numpy import caps the BLAS/OpenMP thread pools.
"""

import os as _os

__version__ = "0.1.0"

_threads = _os.environ.get("MRBM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
