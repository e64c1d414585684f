"""Exact and Monte-Carlo algebra for diagonal Gaussians and their mixtures.

All prior/posterior quantities in the engine are diagonal Gaussians in a
shared latent space; this module is the single place their math lives.
Everything here is a pure function over immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

LOG_2PI = kernels.LOG_2PI

# Monte-Carlo sample counts for KL-to-mixture estimates: cheap during
# training, tighter for reported evaluation.
MC_TRAIN_SAMPLES = 64
MC_EVAL_SAMPLES = 4096

WEIGHT_TOL = 1e-9


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """Diagonal Gaussian: per-dimension mean and strictly positive std."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        std = _as_vector(self.std, "std")
        if mean.shape != std.shape:
            raise ValueError(f"mean/std length mismatch: {mean.shape} vs {std.shape}")
        if np.any(std <= 0.0):
            raise ValueError("std components must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted list of same-dimension DiagGaussians.

    Weights must be nonnegative with a positive sum; they are normalized to
    sum to one at construction.
    """

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        w = _as_vector(self.weights, "weights")
        if w.shape[0] != len(comps):
            raise ValueError("one weight per component required")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        if total <= 0.0:
            raise ValueError("weights must have positive sum")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w / total)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def __len__(self) -> int:
        return len(self.components)

    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    def stds(self) -> np.ndarray:
        return np.stack([c.std for c in self.components])

    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


def single_component(g: DiagGaussian) -> GaussianMixture:
    return GaussianMixture((g,), np.ones(1))


def _check_dim(d: int, x: np.ndarray, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (d,):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({d},)")
    return arr


def gauss_log_prob(g: DiagGaussian, x) -> float:
    """log N(x; mean, diag(std^2))."""
    x = _check_dim(g.dim, x)
    z = (x - g.mean) / g.std
    return float(-0.5 * np.dot(z, z) - np.sum(np.log(g.std)) - 0.5 * g.dim * LOG_2PI)


def gauss_kl(p: DiagGaussian, q: DiagGaussian) -> float:
    """Closed-form KL(p || q) for diagonal Gaussians; nonnegative."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    var_ratio = (p.std / q.std) ** 2
    mean_term = ((p.mean - q.mean) / q.std) ** 2
    kl = 0.5 * np.sum(var_ratio + mean_term - 1.0 - np.log(var_ratio))
    return float(max(kl, 0.0))


def gauss_product(a: DiagGaussian, b: DiagGaussian) -> DiagGaussian:
    """Normalized pointwise density product of two diagonal Gaussians.

    mu* = (w1^2 mu2 + w2^2 mu1) / (w1^2 + w2^2),
    w*  = sqrt(w1^2 w2^2 / (w1^2 + w2^2)), elementwise.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    v1 = a.std**2
    v2 = b.std**2
    denom = v1 + v2
    mean = (v1 * b.mean + v2 * a.mean) / denom
    std = np.sqrt(v1 * v2 / denom)
    return DiagGaussian(mean, std)


def gauss_sample(g: DiagGaussian, noise) -> np.ndarray:
    """Reparameterized sample mean + std * noise for standard-normal noise."""
    noise = _check_dim(g.dim, noise, "noise")
    return g.mean + g.std * noise


def gauss_entropy(g: DiagGaussian) -> float:
    """Differential entropy: sum_i (0.5 ln(2 pi e) + ln sigma_i)."""
    return float(0.5 * g.dim * (1.0 + LOG_2PI) + np.sum(np.log(g.std)))


def mixture_log_prob(m: GaussianMixture, x) -> float:
    """log sum_k w_k N(x; component_k), computed in log-sum-exp form."""
    x = _check_dim(m.dim, x)
    lp, _ = kernels.mixture_log_prob_fwd(x[None, :], m.means(), m.stds(), m.log_weights())
    return float(lp[0])


def batch_mixture_log_prob(m: GaussianMixture, xs: np.ndarray) -> np.ndarray:
    """Vectorized ``mixture_log_prob`` for an (n, d) batch of points."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != m.dim:
        raise ValueError(f"points have shape {xs.shape}, expected (n, {m.dim})")
    lp, _ = kernels.mixture_log_prob_fwd(xs, m.means(), m.stds(), m.log_weights())
    return lp


def _batch_gauss_log_prob(g: DiagGaussian, xs: np.ndarray) -> np.ndarray:
    # same kernel as the mixture path, so p == mixture cancels bitwise
    return kernels.pairwise_log_prob(xs, g.mean[None, :], g.std[None, :])[:, 0]


def stratified_counts(weights: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder apportionment of n draws across mixture weights."""
    weights = np.asarray(weights, dtype=np.float64)
    exact = weights * n
    counts = np.floor(exact).astype(int)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def mixture_sample(m: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """n stratified samples: component counts proportional to weights."""
    eps = rng.standard_normal((n, m.dim))
    return _assign_mixture_noise(m, eps)


def _assign_mixture_noise(m: GaussianMixture, eps: np.ndarray) -> np.ndarray:
    counts = stratified_counts(m.weights, eps.shape[0])
    out = np.empty_like(eps)
    row = 0
    for comp, cnt in zip(m.components, counts):
        if cnt == 0:
            continue
        out[row : row + cnt] = comp.mean + comp.std * eps[row : row + cnt]
        row += cnt
    return out


def mc_kl_to_mixture(p: DiagGaussian, m: GaussianMixture, n_samples: int, seed: int) -> float:
    """Monte-Carlo KL(p || m): mean of log p(c) - log m(c) over samples from p."""
    if p.dim != m.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {m.dim}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    return _mc_kl(p, m, n_samples, rng)


def _mc_kl(p: DiagGaussian, m: GaussianMixture, n: int, rng: np.random.Generator) -> float:
    eps = rng.standard_normal((n, p.dim))
    c = p.mean + p.std * eps
    lp_p = _batch_gauss_log_prob(p, c)
    lp_m = batch_mixture_log_prob(m, c)
    return float(np.mean(lp_p - lp_m))


def symmetric_kl(p: DiagGaussian, m: GaussianMixture, n_samples: int, seed: int) -> float:
    """KL(p || m) + KL(m || p), both estimated from one shared noise block.

    The reverse direction samples the mixture by stratified component
    selection; sharing the standard-normal block between directions makes
    the estimator exactly symmetric when p is the mixture's sole component.
    """
    if p.dim != m.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {m.dim}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, p.dim))

    c = p.mean + p.std * eps
    fwd = np.mean(_batch_gauss_log_prob(p, c) - batch_mixture_log_prob(m, c))

    x = _assign_mixture_noise(m, eps)
    rev = np.mean(batch_mixture_log_prob(m, x) - _batch_gauss_log_prob(p, x))
    return float(fwd + rev)
