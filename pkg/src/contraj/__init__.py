"""Continual multi-agent trajectory prediction with causal intervention.

A recurrent CVAE whose context posterior is regularized against a
continually grown mixture-of-Gaussians prior queue, trained task by task
with a min-max procedure and evaluated for accuracy and forgetting.
"""

__version__ = "0.1.0"

from .gaussian import DiagGaussian, GaussianMixture  # noqa: F401
from .kernels import BACKEND as kernel_backend  # noqa: F401
