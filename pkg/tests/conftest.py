"""Pin BLAS to one thread before numpy loads.

Multi-threaded gemm can vary reduction order run to run, which would
break the bit-identical decode equivalence checks and skew the
benchmark comparisons.  Must run before any test module imports numpy.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
             "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
