"""Hot kernels: compiled extension when built, pure Python otherwise.

Set ``COTOPE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("COTOPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"

kahan_sum = backend.kahan_sum
kahan_mean = backend.kahan_mean
nested_means = backend.nested_means
sample_tokens = backend.sample_tokens

__all__ = ["BACKEND_NAME", "kahan_sum", "kahan_mean", "nested_means", "sample_tokens"]
