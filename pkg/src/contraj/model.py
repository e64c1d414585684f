"""Intervention CVAE over multi-agent displacement sequences.

Two recurrent encoders map observed displacements to latent Gaussians: a
trajectory encoder and a context encoder whose output approximates the
environment confounder.  Their density product gives the fused latent used
by the future decoder; a feed-forward head reconstructs the past.  The
training loss couples prediction and reconstruction with a Monte-Carlo KL
against the mixture prior and a (maximized) symmetric-KL diversity term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tape, Var
from .gaussian import (
    MC_TRAIN_SAMPLES,
    LOG_2PI,
    DiagGaussian,
    GaussianMixture,
    gauss_product,
    stratified_counts,
)
from .nn import ParamStore, affine, ff_forward, gru_cell, gru_forward, init_affine, init_ff, init_gru

LOGSTD_MIN = -6.0
LOGSTD_MAX = 3.0


@dataclass
class ModelConfig:
    obs_len: int = 8
    pred_len: int = 12
    latent_dim: int = 16
    hidden_dim: int = 32
    neighbor_pooling: str = "mean"
    lambda_pred: float = 1.0
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    lambda_sym: float = 0.1
    mc_samples: int = MC_TRAIN_SAMPLES

    def __post_init__(self):
        if self.obs_len < 2 or self.pred_len < 1 or self.latent_dim < 1:
            raise ValueError("obs_len >= 2, pred_len >= 1, latent_dim >= 1 required")
        if self.neighbor_pooling != "mean":
            raise ValueError(f"unsupported pooling: {self.neighbor_pooling}")
        for lam in (self.lambda_pred, self.lambda_rec, self.lambda_kl, self.lambda_sym):
            if lam < 0:
                raise ValueError("loss weights must be nonnegative")


@dataclass
class TrajectoryBatch:
    """Flattened agents of one or more scenes, as displacement sequences."""

    obs_disp: np.ndarray  # (A, obs_len-1, 2)
    last_pos: np.ndarray  # (A, 2)
    fut_disp: np.ndarray  # (A, pred_len, 2)
    fut_pos: np.ndarray  # (A, pred_len, 2)
    scene_index: np.ndarray  # (A,) int, agents of one scene share a value
    scenes: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("obs_disp", "last_pos", "fut_disp", "fut_pos"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)
        self.scene_index = np.asarray(self.scene_index, dtype=np.int64)
        if self.obs_disp.shape[0] == 0:
            raise ValueError("batch has no agents")

    @property
    def n_agents(self) -> int:
        return self.obs_disp.shape[0]

    @classmethod
    def from_scenes(cls, scenes, obs_len: int, pred_len: int) -> "TrajectoryBatch":
        from .data import window_split

        parts = [window_split(s, obs_len, pred_len) for s in scenes]
        index = np.concatenate(
            [np.full(s.n_agents, i, dtype=np.int64) for i, s in enumerate(scenes)]
        )
        return cls(
            obs_disp=np.concatenate([p["obs_disp"] for p in parts]),
            last_pos=np.concatenate([p["last_pos"] for p in parts]),
            fut_disp=np.concatenate([p["fut_disp"] for p in parts]),
            fut_pos=np.concatenate([p["fut_pos"] for p in parts]),
            scene_index=index,
            scenes=list(scenes),
        )


def init_model(config: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    h, d = config.hidden_dim, config.latent_dim
    for enc in ("enc", "ctx"):
        init_gru(store, f"{enc}.gru", 2, h, rng)
        init_affine(store, f"{enc}.mu", 2 * h, d, rng)
        init_affine(store, f"{enc}.ls", 2 * h, d, rng)
    init_affine(store, "dec.init", 2 * h + d, h, rng)
    init_gru(store, "dec.gru", 2 + d, h, rng)
    init_affine(store, "dec.out", h, 2, rng)
    init_ff(store, "rec", [d, h, (config.obs_len - 1) * 2], rng)
    return store


def pool_matrix(scene_index: np.ndarray) -> np.ndarray:
    """Row-normalized same-scene adjacency without self; lone agents get a
    zero row, so their neighbor pool is the zero vector."""
    same = scene_index[:, None] == scene_index[None, :]
    np.fill_diagonal(same, False)
    counts = same.sum(axis=1, keepdims=True)
    return np.where(counts > 0, same / np.maximum(counts, 1), 0.0)


def _encode_block(store, tape, prefix: str, obs_disp: np.ndarray, pool: np.ndarray):
    """GRU over own displacements + mean-pooled neighbor hidden states."""
    steps = [Var(np.ascontiguousarray(obs_disp[:, t, :])) for t in range(obs_disp.shape[1])]
    h, _ = gru_forward(store, tape, f"{prefix}.gru", steps)
    pooled = ad.matmul(Var(pool), h)
    ctxv = ad.concat([h, pooled], axis=1)
    mu = affine(store, tape, f"{prefix}.mu", ctxv)
    log_std = ad.clip(affine(store, tape, f"{prefix}.ls", ctxv), LOGSTD_MIN, LOGSTD_MAX)
    return mu, ad.exp(log_std), log_std, ctxv


def _fuse(mu1, std1, mu2, std2):
    """Differentiable twin of gaussian.gauss_product."""
    v1 = std1 * std1
    v2 = std2 * std2
    denom = v1 + v2
    mean = (v1 * mu2 + v2 * mu1) / denom
    std = ad.sqrt(v1 * v2 / denom)
    return mean, std


def _decode_positions(store, tape, z, ctxv, last_pos: np.ndarray, config: ModelConfig):
    """Recurrent rollout of pred_len displacement steps, cumsum'd to
    absolute positions.  Returns the list of per-step position Vars."""
    h = ad.tanh(affine(store, tape, "dec.init", ad.concat([ctxv, z], axis=1)))
    prev = Var(np.zeros((z.value.shape[0], 2)))
    pos = Var(last_pos)
    out = []
    for _ in range(config.pred_len):
        h = gru_cell(store, tape, "dec.gru", ad.concat([prev, z], axis=1), h)
        step = affine(store, tape, "dec.out", h)
        pos = pos + step
        prev = step
        out.append(pos)
    return out


def _rowwise_log_prob(c, mu, std, log_std, dim_axis: int):
    """log N(c; mu, std) summed over the last axis, all Vars broadcastable."""
    z = (c - mu) / std
    return (
        ad.vsum(z * z, axis=dim_axis) * -0.5
        - ad.vsum(log_std, axis=dim_axis)
        - 0.5 * mu.value.shape[-1] * LOG_2PI
    )


def _mixture_log_prob_node(x: Var, prior: GaussianMixture) -> Var:
    """Fused tape node: log-density of rows of x under a frozen mixture."""
    means, stds, log_w = prior.means(), prior.stds(), prior.log_weights()
    lp, resp = kernels.mixture_log_prob_fwd(x.value, means, stds, log_w)
    if x._tape is None:
        return Var(lp)
    return Var(lp, x._tape, ((x, lambda g: kernels.mixture_grad_x(resp, x.value, means, stds, g)),))


# -- public, tape-free views ------------------------------------------------


def _encode_concrete(batch: TrajectoryBatch, params: ParamStore, config: ModelConfig, prefix: str):
    pool = pool_matrix(batch.scene_index)
    mu, std, _, ctxv = _encode_block(params, None, prefix, batch.obs_disp, pool)
    return mu.value, std.value, ctxv.value


def encode_trajectory(batch: TrajectoryBatch, params: ParamStore, config: ModelConfig):
    """Per-agent latent Gaussian from the trajectory encoder."""
    mu, std, _ = _encode_concrete(batch, params, config, "enc")
    return [DiagGaussian(mu[a], std[a]) for a in range(batch.n_agents)]


def encode_context(batch: TrajectoryBatch, params: ParamStore, config: ModelConfig):
    """Per-agent confounder posterior from the context encoder."""
    mu, std, _ = _encode_concrete(batch, params, config, "ctx")
    return [DiagGaussian(mu[a], std[a]) for a in range(batch.n_agents)]


def fuse_posteriors(z_dist: DiagGaussian, c_dist: DiagGaussian) -> DiagGaussian:
    """Density-product fusion of the two encoder posteriors."""
    return gauss_product(z_dist, c_dist)


def decode_future(
    z_sample: np.ndarray,
    agent_context: np.ndarray,
    last_pos: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
) -> np.ndarray:
    """Predicted absolute positions (pred_len, 2) for one agent."""
    z = Var(np.asarray(z_sample, dtype=np.float64)[None, :])
    ctxv = Var(np.asarray(agent_context, dtype=np.float64)[None, :])
    steps = _decode_positions(params, None, z, ctxv, np.asarray(last_pos)[None, :], config)
    return np.stack([s.value[0] for s in steps])


def reconstruct_past(z_sample: np.ndarray, params: ParamStore, config: ModelConfig) -> np.ndarray:
    """Feed-forward reconstruction of the observed displacements."""
    z = Var(np.asarray(z_sample, dtype=np.float64)[None, :])
    flat = ff_forward(params, None, "rec", z)
    return flat.value.reshape(config.obs_len - 1, 2)


def reconstruction_error(recon: np.ndarray, obs_disp: np.ndarray) -> float:
    """L2 norm between reconstructed and observed displacement stacks."""
    return float(np.sqrt(np.sum((recon - obs_disp) ** 2)))


# -- training loss ------------------------------------------------------------


def max_step_loss(
    batch: TrajectoryBatch,
    prior: GaussianMixture | None,
    prev_prior: GaussianMixture | None,
    pseudo_features,
    config: ModelConfig,
    params: ParamStore,
    seed: int,
    tape: Tape | None = None,
):
    """Maximization-step loss (reported negated as a minimization target).

    parts: prediction MSE/frame, past-reconstruction L2, mean per-agent
    Monte-Carlo KL to the prior, and the symmetric-KL diversity bonus of
    the current task's pseudo-features against the previous-task mixture
    (entering with a minus sign: it is being maximized).
    """
    if prior is None and config.lambda_kl > 0:
        raise ValueError("non-empty prior required while lambda_kl > 0; seed the queue first")
    own_tape = tape is None
    if own_tape:
        tape = Tape()
    rng = np.random.default_rng(seed)
    A = batch.n_agents
    d = config.latent_dim
    pool = pool_matrix(batch.scene_index)

    mu1, std1, _, ctxv = _encode_block(params, tape, "enc", batch.obs_disp, pool)
    mu2, std2, ls2, _ = _encode_block(params, tape, "ctx", batch.obs_disp, pool)
    mu_f, std_f = _fuse(mu1, std1, mu2, std2)

    # one fused-posterior sample per agent drives prediction + reconstruction
    z = mu_f + std_f * Var(rng.standard_normal((A, d)))
    pred_steps = _decode_positions(params, tape, z, ctxv, batch.last_pos, config)
    sq = None
    for t, pos in enumerate(pred_steps):
        diff = pos - Var(np.ascontiguousarray(batch.fut_pos[:, t, :]))
        term = ad.vsum(diff * diff, axis=1)
        sq = term if sq is None else sq + term
    pred_part = ad.vmean(sq * (1.0 / config.pred_len))

    recon = ff_forward(params, tape, "rec", z)
    target = batch.obs_disp.reshape(A, -1)
    rdiff = recon - Var(target)
    rec_part = ad.vmean(ad.sqrt(ad.vsum(rdiff * rdiff, axis=1) + 1e-24))

    if config.lambda_kl > 0:
        S = config.mc_samples
        eps = rng.standard_normal((A, S, d))
        mu_e = ad.expand_dims(mu2, 1)
        std_e = ad.expand_dims(std2, 1)
        c = mu_e + std_e * Var(eps)
        lp_own = _rowwise_log_prob(c, mu_e, std_e, ad.expand_dims(ls2, 1), dim_axis=2)
        lp_prior = ad.reshape(_mixture_log_prob_node(ad.reshape(c, (A * S, d)), prior), (A, S))
        kl_part = ad.vmean(lp_own - lp_prior)
    else:
        kl_part = Var(0.0)

    if config.lambda_sym > 0 and prev_prior is not None and len(pseudo_features) > 0:
        sym_part = _symmetric_kl_node(params, tape, pseudo_features, prev_prior, config, rng)
    else:
        sym_part = Var(0.0)

    loss = (
        config.lambda_pred * pred_part
        + config.lambda_rec * rec_part
        + config.lambda_kl * kl_part
        - config.lambda_sym * sym_part
    )
    parts = {
        "pred": float(pred_part.value),
        "rec": float(rec_part.value),
        "kl": float(kl_part.value),
        "sym": float(sym_part.value),
        "total": float(loss.value),
    }
    if own_tape:
        return float(loss.value), parts
    return loss, parts


def encode_pseudo_features(params: ParamStore, tape, pseudo_features, config: ModelConfig):
    """Context-encode pseudo-trajectories (empty neighbor sets)."""
    stack = np.stack([np.asarray(u, dtype=np.float64) for u in pseudo_features])
    pool = np.zeros((stack.shape[0], stack.shape[0]))
    mu, std, ls, _ = _encode_block(params, tape, "ctx", stack, pool)
    return mu, std, ls


def _symmetric_kl_node(params, tape, pseudo_features, prev_prior, config, rng):
    """Differentiable symmetric KL between each pseudo-feature's posterior
    and the previous-task mixture, averaged over pseudo-features.  Gradients
    flow into the context encoder; the mixture is a frozen snapshot."""
    mu, std, ls = encode_pseudo_features(params, tape, pseudo_features, config)
    P = mu.value.shape[0]
    S = config.mc_samples
    d = config.latent_dim

    eps = rng.standard_normal((P, S, d))
    mu_e, std_e, ls_e = ad.expand_dims(mu, 1), ad.expand_dims(std, 1), ad.expand_dims(ls, 1)
    c = mu_e + std_e * Var(eps)
    lp_own = _rowwise_log_prob(c, mu_e, std_e, ls_e, dim_axis=2)
    lp_mix = ad.reshape(_mixture_log_prob_node(ad.reshape(c, (P * S, d)), prev_prior), (P, S))
    fwd = ad.vmean(lp_own - lp_mix, axis=1)

    counts = stratified_counts(prev_prior.weights, S)
    eps_rev = rng.standard_normal((S, d))
    xs = np.empty_like(eps_rev)
    row = 0
    for comp, cnt in zip(prev_prior.components, counts):
        if cnt:
            xs[row : row + cnt] = comp.mean + comp.std * eps_rev[row : row + cnt]
            row += cnt
    lp_mix_rev = kernels.mixture_log_prob_fwd(
        xs, prev_prior.means(), prev_prior.stds(), prev_prior.log_weights()
    )[0]
    lp_own_rev = _rowwise_log_prob(Var(xs[None, :, :]), mu_e, std_e, ls_e, dim_axis=2)
    rev = ad.vmean(Var(lp_mix_rev[None, :]) - lp_own_rev, axis=1)
    return ad.vmean(fwd + rev)


# -- evaluation-time sampling -------------------------------------------------


def predict(
    batch: TrajectoryBatch,
    params: ParamStore,
    config: ModelConfig,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """k decoded futures per agent, sampled from the fused posterior built
    from observed frames only.  Returns (A, k, pred_len, 2)."""
    pool = pool_matrix(batch.scene_index)
    mu1, std1, _, ctxv = _encode_block(params, None, "enc", batch.obs_disp, pool)
    mu2, std2, _, _ = _encode_block(params, None, "ctx", batch.obs_disp, pool)
    mu_f, std_f = _fuse(mu1, std1, mu2, std2)

    A, d = batch.n_agents, config.latent_dim
    noise = rng.standard_normal((A, k, d))
    z = mu_f.value[:, None, :] + std_f.value[:, None, :] * noise  # (A, k, d)
    z_rows = Var(z.reshape(A * k, d))
    ctx_rows = Var(np.repeat(ctxv.value, k, axis=0))
    last_rows = np.repeat(batch.last_pos, k, axis=0)
    steps = _decode_positions(params, None, z_rows, ctx_rows, last_rows, config)
    out = np.stack([s.value for s in steps], axis=1)  # (A*k, pred, 2)
    return out.reshape(A, k, config.pred_len, 2)
