"""Graph WaveNet and GWNV2 traffic forecasting on a small numpy autodiff core."""

import os

__version__ = "0.1.0"

# STWAVE_THREADS=1 pins BLAS to one thread (deterministic mode).  This only
# takes effect if it runs before numpy loads its BLAS, which holds for the
# CLI entry point and for ``python -m stwave``.
_threads = os.environ.get("STWAVE_THREADS", "").strip()
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads


def deterministic_mode() -> bool:
    return os.environ.get("STWAVE_THREADS", "").strip() == "1"
