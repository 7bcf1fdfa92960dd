"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise, or when
``FUSEREG_PURE_PYTHON`` is set to a non-empty value other than ``0``, the
numpy fallback in ``_kernels_py`` is used. Both expose the same functions.
"""
import os

if os.environ.get("FUSEREG_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND
expit = _impl.expit
logistic_loglik_grad_hess = _impl.logistic_loglik_grad_hess
normal_expit_mean = _impl.normal_expit_mean
ipw_factor = _impl.ipw_factor
dr_factor = _impl.dr_factor
k_rows = _impl.k_rows
