"""From-scratch CNN engine for binary retinal-image classification."""

import numba

# The bundled TBB is too old for numba; prefer OpenMP and skip the warning.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
