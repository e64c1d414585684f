"""Hot Gaussian kernels with import-time backend selection.

Prefers the compiled extension (``_fast``); falls back to the numpy
reference (``_ref``) when the extension was not built.  Set
``CONTRAJ_KERNEL_BACKEND=numpy`` (or ``compiled``) to force a choice.
``BACKEND`` records what was picked.
"""

import os

_choice = os.environ.get("CONTRAJ_KERNEL_BACKEND", "auto")

if _choice == "numpy":
    from . import _ref as _impl
elif _choice == "compiled":
    from . import _fast as _impl  # ImportError here means the ext is missing
else:
    try:
        from . import _fast as _impl
    except ImportError:
        from . import _ref as _impl

BACKEND = "compiled" if _impl.IS_COMPILED else "numpy"
LOG_2PI = _impl.LOG_2PI

pairwise_log_prob = _impl.pairwise_log_prob
mixture_log_prob_fwd = _impl.mixture_log_prob_fwd
mixture_grad_x = _impl.mixture_grad_x
