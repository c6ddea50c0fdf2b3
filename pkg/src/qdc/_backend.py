"""Select the compiled kernels when available, else the numpy fallback.

Set ``QDC_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the parity tests).
"""
import os

from qdc import _fallback

if os.environ.get("QDC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from qdc import _core as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

csr_matmat = _impl.csr_matmat
threshold_block = _impl.threshold_block
topk_block = _impl.topk_block
homophily_counts = _impl.homophily_counts
