"""Numpy reference implementation of the hot Gaussian kernels.

Every Monte-Carlo KL estimate in the engine reduces to evaluating a batch of
points under a diagonal-Gaussian mixture, so these three functions are the
innermost loops of training.  A compiled twin lives in ``_fast.pyx``; both
expose identical signatures and are interchangeable.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

IS_COMPILED = False


def pairwise_log_prob(x: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """Log-density of each row of ``x`` (n, d) under each component (k, d).

    Returns an (n, k) matrix.  The quadratic form is expanded into three
    matrix products so no (n, k, d) temporary is materialized.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    stds = np.ascontiguousarray(stds, dtype=np.float64)
    inv_var = 1.0 / (stds * stds)  # (k, d)
    # sum_d (x - mu)^2 / var  =  x^2 . iv  -  2 x . (mu iv)  +  sum mu^2 iv
    quad = (x * x) @ inv_var.T - 2.0 * (x @ (means * inv_var).T)
    quad += np.sum(means * means * inv_var, axis=1)
    const = np.sum(np.log(stds), axis=1) + 0.5 * x.shape[1] * LOG_2PI  # (k,)
    return -0.5 * quad - const


def mixture_log_prob_fwd(
    x: np.ndarray, means: np.ndarray, stds: np.ndarray, log_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Stable log sum_k w_k N(x; mu_k, sigma_k) for each row of ``x``.

    Returns ``(lp, resp)`` where ``lp`` is (n,) and ``resp`` is the (n, k)
    posterior responsibility matrix, which doubles as the backward cache.
    """
    z = pairwise_log_prob(x, means, stds) + np.asarray(log_w, dtype=np.float64)
    zmax = np.max(z, axis=1)
    e = np.exp(z - zmax[:, None])
    s = np.sum(e, axis=1)
    lp = zmax + np.log(s)
    resp = e / s[:, None]
    return lp, resp


def mixture_grad_x(
    resp: np.ndarray,
    x: np.ndarray,
    means: np.ndarray,
    stds: np.ndarray,
    gout: np.ndarray,
) -> np.ndarray:
    """d lp / d x scaled by the incoming cotangent ``gout`` (n,).

    d lp_i / d x_i = sum_k resp_ik (mu_k - x_i) / sigma_k^2.
    """
    inv_var = 1.0 / (stds * stds)
    t = resp @ (means * inv_var) - x * (resp @ inv_var)
    return np.asarray(gout, dtype=np.float64)[:, None] * t
