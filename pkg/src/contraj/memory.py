"""Continual prior memory: a capacity-bounded queue of pseudo-features.

Each component stores a trainable input-space pseudo-trajectory (plus
additive noise) whose context-encoder posterior serves as one mixture
component of the evolving latent prior.  Components are acquired online
(streamed, one at a time) or offline (clustered up front), refined by
gradient ascent on a boosting-style objective, weighted by grid search,
and pruned for redundancy when the queue outgrows its capacity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, grad_of
from .gaussian import (
    LOG_2PI,
    DiagGaussian,
    GaussianMixture,
    batch_mixture_log_prob,
    mixture_sample,
)
from .model import ModelConfig, TrajectoryBatch, encode_pseudo_features
from .nn import ParamStore

QUEUE_SCHEMA_VERSION = 1
WEIGHT_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class PriorComponent:
    """Trainable pseudo-trajectory backing one prior component."""

    U: np.ndarray  # (obs_len-1, 2) displacement sequence
    eps: np.ndarray  # same shape, additive trainable noise
    task_id: int
    creation_epoch: int = 0

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        eps = np.asarray(self.eps, dtype=np.float64)
        if U.shape != eps.shape or U.ndim != 2 or U.shape[1] != 2:
            raise ValueError(f"U/eps must share shape (T, 2), got {U.shape} vs {eps.shape}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(eps))):
            raise ValueError("pseudo-feature values must be finite")
        if self.task_id < 1:
            raise ValueError("task_id must be >= 1")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "eps", eps)

    def feature(self) -> np.ndarray:
        return self.U + self.eps


class MemoryQueue:
    """Ordered prior components with a probability weight vector."""

    def __init__(self, gamma: int, components=None, weights=None, counts=None):
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        self.gamma = int(gamma)
        self.components: list[PriorComponent] = list(components or [])
        if weights is None:
            weights = np.full(len(self.components), 1.0) if self.components else np.zeros(0)
        self.weights = np.asarray(weights, dtype=np.float64).copy()
        self.counts: dict[int, int] = dict(counts or {})
        if self.components:
            self._renormalize()

    def __len__(self) -> int:
        return len(self.components)

    def _renormalize(self) -> None:
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("queue weights must be finite and nonnegative")
        total = self.weights.sum()
        if total <= 0:
            raise ValueError("queue weights must have positive sum")
        self.weights = self.weights / total

    def enqueue(self, component: PriorComponent, share: float | None = None) -> None:
        """Append a component holding ``share`` of the total weight mass."""
        if not self.components:
            self.components.append(component)
            self.weights = np.array([1.0])
            return
        if share is None:
            share = 1.0 / (len(self.components) + 1)
        share = float(np.clip(share, 1e-6, 1.0 - 1e-6))
        self.weights = np.append(self.weights * (1.0 - share), share)
        self.components.append(component)
        self._renormalize()

    def extend(self, components, total_share: float) -> None:
        """Enqueue a block of components splitting ``total_share`` uniformly."""
        components = list(components)
        if not components:
            return
        if not self.components:
            self.components = components
            self.weights = np.full(len(components), 1.0 / len(components))
            return
        total_share = float(np.clip(total_share, 1e-6, 1.0 - 1e-6))
        per = total_share / len(components)
        self.weights = np.concatenate(
            [self.weights * (1.0 - total_share), np.full(len(components), per)]
        )
        self.components.extend(components)
        self._renormalize()

    def set_uniform_weights(self) -> None:
        if self.components:
            self.weights = np.full(len(self.components), 1.0 / len(self.components))

    def reweight(self, index: int, alpha_star: float) -> None:
        """Give component ``index`` weight 1 - alpha*; others share alpha*."""
        w = self.weights.copy()
        rest = np.delete(w, index)
        rest_total = rest.sum()
        if rest_total <= 0:
            return
        w[index] = 1.0 - alpha_star
        scale = alpha_star / rest_total
        for j in range(len(w)):
            if j != index:
                w[j] *= scale
        self.weights = np.clip(w, 1e-12, None)
        self._renormalize()

    def remove(self, index: int) -> None:
        del self.components[index]
        self.weights = np.delete(self.weights, index)
        if self.components:
            self._renormalize()

    def without(self, index: int) -> "MemoryQueue":
        """View of the queue minus one component, weights renormalized."""
        comps = [c for i, c in enumerate(self.components) if i != index]
        weights = np.delete(self.weights, index)
        return MemoryQueue(self.gamma, comps, weights, self.counts)

    def task_indices(self, task_id: int):
        return [i for i, c in enumerate(self.components) if c.task_id == task_id]

    def history_fraction(self) -> float:
        """|D^(<K)| / |D^(<=K)| with K the newest task in the counts."""
        if not self.counts:
            return 0.0
        current = max(self.counts)
        total = sum(self.counts.values())
        return (total - self.counts[current]) / total if total else 0.0


def materialize(queue: MemoryQueue, params: ParamStore, config: ModelConfig) -> GaussianMixture:
    """Encode every pseudo-feature under the current context encoder.

    Components are re-encoded each call, so the mixture tracks the encoder.
    """
    if not queue.components:
        raise ValueError("cannot materialize an empty queue")
    feats = [c.feature() for c in queue.components]
    mu, std, _ = encode_pseudo_features(params, None, feats, config)
    comps = tuple(DiagGaussian(mu.value[i], std.value[i]) for i in range(len(feats)))
    return GaussianMixture(comps, queue.weights.copy())


def aggregated_posterior_target(
    queue: MemoryQueue,
    batch: TrajectoryBatch | None,
    params: ParamStore,
    config: ModelConfig,
) -> GaussianMixture:
    """Mixture approximating the aggregated posterior over all data so far:
    stored-component posteriors weighted by the historical data fraction,
    plus current-batch posteriors sharing the current-task fraction."""
    from .model import encode_context

    have_queue = len(queue) > 0
    have_batch = batch is not None and batch.n_agents > 0
    if not have_queue and not have_batch:
        raise ValueError("target needs a queue or a batch")

    hist_frac = queue.history_fraction()
    w_hist = hist_frac if have_batch else 1.0
    if not have_queue:
        w_hist = 0.0

    comps: list[DiagGaussian] = []
    weights: list[float] = []
    if have_queue and w_hist > 0:
        mix = materialize(queue, params, config)
        comps.extend(mix.components)
        weights.extend(w_hist * mix.weights)
    if have_batch and (1.0 - w_hist) > 0:
        posts = encode_context(batch, params, config)
        comps.extend(posts)
        weights.extend(np.full(len(posts), (1.0 - w_hist) / len(posts)))
    return GaussianMixture(tuple(comps), np.asarray(weights))


def init_online_component(
    batch: TrajectoryBatch,
    queue: MemoryQueue,
    params: ParamStore,
    config: ModelConfig,
    noise_seed: int,
    task_id: int,
    epoch: int = 1,
) -> PriorComponent:
    """Seed a component from the batch agent whose context posterior is
    closest (Monte-Carlo KL) to the aggregated-posterior target."""
    from .model import encode_context

    rng = np.random.default_rng(noise_seed)
    target = aggregated_posterior_target(queue, batch, params, config)
    posts = encode_context(batch, params, config)

    S = config.mc_samples
    d = config.latent_dim
    eps = rng.standard_normal((len(posts), S, d))
    best_idx, best_kl = 0, np.inf
    means, stds, log_w = target.means(), target.stds(), target.log_weights()
    from . import kernels

    for i, p in enumerate(posts):
        c = p.mean + p.std * eps[i]
        z = (c - p.mean) / p.std
        lp_own = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(p.std)) - 0.5 * d * LOG_2PI
        lp_mix = kernels.mixture_log_prob_fwd(c, means, stds, log_w)[0]
        kl = float(np.mean(lp_own - lp_mix))
        if kl < best_kl:
            best_idx, best_kl = i, kl
    U = batch.obs_disp[best_idx].copy()
    noise = 0.01 * rng.standard_normal(U.shape)
    return PriorComponent(U, noise, task_id, epoch)


def init_offline_components(
    batch: TrajectoryBatch,
    k: int,
    params: ParamStore,
    config: ModelConfig,
    seed: int,
    task_id: int,
) -> list[PriorComponent]:
    """Cluster context-embedding means with seeded k-means and return the
    per-cluster medoid trajectories as pseudo-features."""
    from .model import encode_context

    if batch.n_agents < k:
        raise ValueError(f"need at least {k} trajectories, got {batch.n_agents}")
    rng = np.random.default_rng(seed)
    posts = encode_context(batch, params, config)
    emb = np.stack([p.mean for p in posts])
    centers = _kmeans(emb, k, rng, n_iter=50)

    comps = []
    taken: set[int] = set()
    for center in centers:
        dist = np.linalg.norm(emb - center, axis=1)
        order = np.argsort(dist, kind="stable")
        medoid = next(int(i) for i in order if int(i) not in taken)
        taken.add(medoid)
        U = batch.obs_disp[medoid].copy()
        noise = 0.01 * rng.standard_normal(U.shape)
        comps.append(PriorComponent(U, noise, task_id, 1))
    return comps


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 50) -> np.ndarray:
    """Seeded Lloyd iterations with k-means++ initialization."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = x[rng.integers(n)]
        else:
            centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    for _ in range(n_iter):
        dist = np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2)
        labels = np.argmin(dist, axis=1)
        moved = False
        for j in range(k):
            mask = labels == j
            if not np.any(mask):
                far = int(np.argmax(np.min(dist, axis=1)))
                centers[j] = x[far]
                moved = True
                continue
            new = x[mask].mean(axis=0)
            if not np.allclose(new, centers[j]):
                moved = True
            centers[j] = new
        if not moved:
            break
    return centers


def optimize_component(
    component: PriorComponent,
    queue: MemoryQueue,
    batch: TrajectoryBatch | None,
    params: ParamStore,
    config: ModelConfig,
    steps: int = 10,
    lr: float = 1e-2,
    seed: int = 0,
    target: GaussianMixture | None = None,
    reference_mixture: GaussianMixture | None = None,
) -> PriorComponent:
    """Gradient ascent on E_{c~Q(C|U+eps)}[log target(c) - log M(c)] plus the
    posterior entropy, training U and eps with the encoder frozen.

    ``target`` and ``reference_mixture`` default to the aggregated-posterior
    target and the materialized queue (minus this component, if enqueued).
    """
    if len(queue) == 0:
        raise ValueError("component optimization needs a non-empty queue")
    base = queue
    for i, c in enumerate(queue.components):
        if c is component:
            base = queue.without(i)
            break
    if len(base) == 0:
        base = queue
    mix = reference_mixture if reference_mixture is not None else materialize(base, params, config)
    if target is None:
        target = aggregated_posterior_target(base, batch, params, config)

    rng = np.random.default_rng(seed)
    U = component.U.copy()
    eps = component.eps.copy()
    S = config.mc_samples
    d = config.latent_dim
    for _ in range(steps):
        tape = Tape()
        u_rows = [Var(U[t : t + 1, :].copy(), tape, ()) for t in range(U.shape[0])]
        e_rows = [Var(eps[t : t + 1, :].copy(), tape, ()) for t in range(eps.shape[0])]
        feats = [u + e for u, e in zip(u_rows, e_rows)]
        mu, std, ls = _encode_feature_rows(params, tape, feats, config)

        noise = rng.standard_normal((S, d))
        c = mu + std * Var(noise)
        lp_target = _frozen_mix_node(c, target)
        lp_m = _frozen_mix_node(c, mix)
        entropy = ad.vsum(ls) + 0.5 * d * (1.0 + LOG_2PI)
        objective = ad.vmean(lp_target - lp_m) + entropy
        ad.backward(tape, objective)
        for t in range(U.shape[0]):
            U[t] += lr * grad_of(u_rows[t])[0]
            eps[t] += lr * grad_of(e_rows[t])[0]
    return replace(component, U=U, eps=eps)


def _encode_feature_rows(params, tape, rows, config):
    """Context-encode one pseudo-trajectory given per-step (1, 2) Vars."""
    from .nn import affine, gru_forward
    from .model import LOGSTD_MAX, LOGSTD_MIN

    h, _ = gru_forward(params, tape, "ctx.gru", rows)
    pooled = Var(np.zeros((1, h.value.shape[1])))
    ctxv = ad.concat([h, pooled], axis=1)
    mu = affine(params, tape, "ctx.mu", ctxv)
    ls = ad.clip(affine(params, tape, "ctx.ls", ctxv), LOGSTD_MIN, LOGSTD_MAX)
    return mu, ad.exp(ls), ls


def _frozen_mix_node(x: Var, mix: GaussianMixture) -> Var:
    from . import kernels

    means, stds, log_w = mix.means(), mix.stds(), mix.log_weights()
    lp, resp = kernels.mixture_log_prob_fwd(x.value, means, stds, log_w)
    if x._tape is None:
        return Var(lp)
    return Var(lp, x._tape, ((x, lambda g: kernels.mixture_grad_x(resp, x.value, means, stds, g)),))


def optimize_weight(
    queue: MemoryQueue,
    new_component: PriorComponent,
    target: GaussianMixture,
    params: ParamStore,
    config: ModelConfig,
    seed: int = 0,
) -> float:
    """Grid search for the blend weight alpha* in
    min_a KL(target || a * M + (1-a) * Q(C|U_new)), a in {0, 0.01, ..., 1}."""
    if len(queue) == 0:
        raise ValueError("weight optimization needs a non-empty queue")
    mix = materialize(queue, params, config)
    mu, std, _ = encode_pseudo_features(params, None, [new_component.feature()], config)
    new_post = DiagGaussian(mu.value[0], std.value[0])

    rng = np.random.default_rng(seed)
    n = max(config.mc_samples, 128)
    xs = mixture_sample(target, n, rng)
    lp_target = batch_mixture_log_prob(target, xs)
    lp_m = batch_mixture_log_prob(mix, xs)
    z = (xs - new_post.mean) / new_post.std
    lp_new = (
        -0.5 * np.sum(z * z, axis=1)
        - np.sum(np.log(new_post.std))
        - 0.5 * new_post.dim * LOG_2PI
    )

    best_alpha, best_kl = 0.0, np.inf
    with np.errstate(divide="ignore"):
        for alpha in WEIGHT_GRID:
            blend = np.logaddexp(np.log(alpha) + lp_m, np.log(1.0 - alpha) + lp_new)
            kl = float(np.mean(lp_target - blend))
            if kl < best_kl:
                best_alpha, best_kl = float(alpha), kl
    return best_alpha


def select_prune_index(vecs: np.ndarray) -> int:
    """Index to drop, given the (K, 2d) concatenated mean/std matrix.

    Closest pair by squared L2, then whichever member has the smaller
    summed distance to the remaining components; ties keep the earlier
    index (lexicographic pair order, then the pair's first member).
    """
    n = vecs.shape[0]
    diff = vecs[:, None, :] - vecs[None, :, :]
    dist = np.sum(diff * diff, axis=2)
    np.fill_diagonal(dist, np.inf)
    flat = np.argmin(dist)
    a, b = int(flat // n), int(flat % n)
    if a > b:
        a, b = b, a
    others = [j for j in range(n) if j not in (a, b)]
    sum_a = float(dist[a, others].sum()) if others else 0.0
    sum_b = float(dist[b, others].sum()) if others else 0.0
    return a if sum_a <= sum_b else b


def prune(queue: MemoryQueue, params: ParamStore, config: ModelConfig) -> MemoryQueue:
    """Drop redundant components until the queue fits its capacity.

    Repeatedly find the closest pair of materialized components (squared L2
    between concatenated mean/std vectors), then remove whichever pair
    member sits closer to everything else; weights renormalize
    proportionally after each removal.
    """
    while len(queue) > queue.gamma:
        mix = materialize(queue, params, config)
        vecs = np.concatenate([mix.means(), mix.stds()], axis=1)
        queue.remove(select_prune_index(vecs))
    return queue


# -- persistence --------------------------------------------------------------


def _queue_payload(queue: MemoryQueue) -> dict:
    return {
        "schema_version": QUEUE_SCHEMA_VERSION,
        "gamma": queue.gamma,
        "counts": {str(k): int(v) for k, v in queue.counts.items()},
        "weights": [float(w) for w in queue.weights],
        "components": [
            {
                "task_id": c.task_id,
                "creation_epoch": c.creation_epoch,
                "U": c.U.tolist(),
                "eps": c.eps.tolist(),
            }
            for c in queue.components
        ],
    }


def save_queue(queue: MemoryQueue, path) -> None:
    with open(path, "w") as fh:
        json.dump(_queue_payload(queue), fh)


def queue_to_json(queue: MemoryQueue) -> str:
    return json.dumps(_queue_payload(queue))


def _queue_from_payload(payload: dict) -> MemoryQueue:
    if not isinstance(payload, dict) or payload.get("schema_version") != QUEUE_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported queue schema: {payload.get('schema_version') if isinstance(payload, dict) else payload!r}"
        )
    comps = [
        PriorComponent(
            np.asarray(c["U"], dtype=np.float64),
            np.asarray(c["eps"], dtype=np.float64),
            int(c["task_id"]),
            int(c["creation_epoch"]),
        )
        for c in payload["components"]
    ]
    weights = np.asarray(payload["weights"], dtype=np.float64)
    if weights.shape[0] != len(comps):
        raise ValueError("weight/component count mismatch")
    if comps and (np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6):
        raise ValueError("stored weights are not a probability vector")
    counts = {int(k): int(v) for k, v in payload["counts"].items()}
    return MemoryQueue(int(payload["gamma"]), comps, weights if len(comps) else None, counts)


def load_queue(path) -> MemoryQueue:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed queue file {path}: {exc}") from None
    return _queue_from_payload(payload)


def queue_from_json(text: str) -> MemoryQueue:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed queue payload: {exc}") from None
    return _queue_from_payload(payload)
