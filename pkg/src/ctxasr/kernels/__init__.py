"""CTC scan kernels: compiled extension when available, numpy otherwise.

Set CTXASR_PURE_PYTHON=1 to force the numpy fallback (useful for the
backend benchmark and for debugging).  ``BACKEND`` reports which
implementation is live.
"""

import os

from . import ctc_numpy

if os.environ.get("CTXASR_PURE_PYTHON", "") == "1":
    _impl = ctc_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _ctc_speed as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = ctc_numpy
        BACKEND = "numpy"

ctc_alpha_beta = _impl.ctc_alpha_beta
ctc_viterbi = _impl.ctc_viterbi
ctc_prefix_score_all = _impl.ctc_prefix_score_all

__all__ = ["BACKEND", "ctc_alpha_beta", "ctc_viterbi", "ctc_prefix_score_all",
           "ctc_numpy"]
