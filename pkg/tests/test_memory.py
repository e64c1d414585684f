"""Prior memory queue: acquisition, optimization, weighting, pruning, I/O."""

import itertools

import numpy as np
import pytest

from contraj.data import TrajectoryScene
from contraj.gaussian import (
    DiagGaussian,
    GaussianMixture,
    batch_mixture_log_prob,
    gauss_entropy,
    mixture_sample,
    single_component,
)
from contraj.memory import (
    MemoryQueue,
    PriorComponent,
    aggregated_posterior_target,
    init_offline_components,
    init_online_component,
    load_queue,
    materialize,
    optimize_component,
    optimize_weight,
    prune,
    save_queue,
    select_prune_index,
)
from contraj.model import ModelConfig, TrajectoryBatch, encode_context, init_model

CFG = ModelConfig(latent_dim=3, hidden_dim=8, mc_samples=32)


def make_batch(n_scenes=2, n_agents=3, seed=0, scale=0.3, offset=0.0):
    rng = np.random.default_rng(seed)
    scenes = [
        TrajectoryScene(
            i,
            offset + rng.normal(scale=scale, size=(n_agents, 20, 2)).cumsum(axis=1),
            list(range(n_agents)),
        )
        for i in range(n_scenes)
    ]
    return TrajectoryBatch.from_scenes(scenes, CFG.obs_len, CFG.pred_len)


def make_component(seed=0, task_id=1, scale=0.3):
    rng = np.random.default_rng(seed)
    U = rng.normal(scale=scale, size=(CFG.obs_len - 1, 2))
    return PriorComponent(U, 0.01 * rng.standard_normal(U.shape), task_id)


def make_queue(n=3, gamma=10, seed=0, counts=None):
    comps = [make_component(seed + i) for i in range(n)]
    return MemoryQueue(gamma, comps, np.full(n, 1.0 / n), counts or {1: 100})


PARAMS = init_model(CFG, seed=99)


# -- types ------------------------------------------------------------------------


def test_component_validation():
    with pytest.raises(ValueError):
        PriorComponent(np.zeros((7, 2)), np.zeros((6, 2)), 1)
    with pytest.raises(ValueError):
        PriorComponent(np.zeros((7, 2)), np.zeros((7, 2)), 0)
    with pytest.raises(ValueError):
        PriorComponent(np.full((7, 2), np.nan), np.zeros((7, 2)), 1)


def test_queue_weight_invariant_after_mutations():
    q = make_queue(3)
    assert abs(q.weights.sum() - 1.0) < 1e-9
    q.enqueue(make_component(50), share=0.3)
    assert abs(q.weights.sum() - 1.0) < 1e-9
    q.reweight(0, 0.7)
    assert abs(q.weights.sum() - 1.0) < 1e-9
    q.remove(1)
    assert abs(q.weights.sum() - 1.0) < 1e-9
    assert np.all(q.weights >= 0)


# -- materialize -------------------------------------------------------------------


def test_materialize_single_component():
    q = make_queue(1)
    mix = materialize(q, PARAMS, CFG)
    assert len(mix) == 1
    assert mix.weights[0] == 1.0


def test_materialize_identical_features_identical_gaussians():
    c = make_component(3)
    dup = PriorComponent(c.U.copy(), c.eps.copy(), 1)
    q = MemoryQueue(5, [c, dup], np.array([0.5, 0.5]), {1: 10})
    mix = materialize(q, PARAMS, CFG)
    np.testing.assert_array_equal(mix.components[0].mean, mix.components[1].mean)
    np.testing.assert_array_equal(mix.components[0].std, mix.components[1].std)


def test_materialize_tracks_encoder():
    q = make_queue(2)
    m1 = materialize(q, PARAMS, CFG)
    other = init_model(CFG, seed=123)
    m2 = materialize(q, other, CFG)
    assert not np.allclose(m1.means(), m2.means())


def test_materialize_empty_queue_rejected():
    with pytest.raises(ValueError):
        materialize(MemoryQueue(5), PARAMS, CFG)


# -- aggregated posterior target ----------------------------------------------------


def test_target_no_history_is_uniform_batch():
    q = MemoryQueue(5, counts={1: 60})
    batch = make_batch(1, 3, seed=1)
    target = aggregated_posterior_target(q, batch, PARAMS, CFG)
    assert len(target) == 3
    np.testing.assert_allclose(target.weights, 1.0 / 3)


def test_target_empty_batch_is_materialized_queue():
    q = make_queue(3, counts={1: 50, 2: 50})
    target = aggregated_posterior_target(q, None, PARAMS, CFG)
    mix = materialize(q, PARAMS, CFG)
    np.testing.assert_allclose(target.weights, mix.weights)
    np.testing.assert_array_equal(target.means(), mix.means())


def test_target_equal_counts_split_half():
    q = make_queue(2, counts={1: 70, 2: 70})
    batch = make_batch(1, 4, seed=2)
    target = aggregated_posterior_target(q, batch, PARAMS, CFG)
    # first two components are the queue, remaining four the batch
    assert target.weights[:2].sum() == pytest.approx(0.5, abs=1e-12)
    assert target.weights[2:].sum() == pytest.approx(0.5, abs=1e-12)


# -- online init ---------------------------------------------------------------------


def test_online_init_single_agent_selected():
    q = make_queue(1, counts={1: 10})
    batch = make_batch(1, 1, seed=3)
    comp = init_online_component(batch, q, PARAMS, CFG, noise_seed=4, task_id=1)
    np.testing.assert_array_equal(comp.U, batch.obs_disp[0])
    assert comp.eps.shape == comp.U.shape
    assert np.abs(comp.eps).max() < 0.1


def test_online_init_matches_bruteforce_selection():
    q = make_queue(2, counts={1: 100})
    batch = make_batch(1, 5, seed=5)
    comp = init_online_component(batch, q, PARAMS, CFG, noise_seed=6, task_id=1)

    # brute force with the same estimator inputs
    target = aggregated_posterior_target(q, batch, PARAMS, CFG)
    posts = encode_context(batch, PARAMS, CFG)
    rng = np.random.default_rng(6)
    eps = rng.standard_normal((len(posts), CFG.mc_samples, CFG.latent_dim))
    kls = []
    for i, p in enumerate(posts):
        c = p.mean + p.std * eps[i]
        z = (c - p.mean) / p.std
        lp_own = -0.5 * (z * z).sum(1) - np.log(p.std).sum() - 0.5 * CFG.latent_dim * np.log(2 * np.pi)
        kls.append(np.mean(lp_own - batch_mixture_log_prob(target, c)))
    np.testing.assert_array_equal(comp.U, batch.obs_disp[int(np.argmin(kls))])


def test_online_init_zero_kl_agent_wins():
    # one batch agent IS the single stored component: its posterior equals
    # the target's queue part; give history all the mass
    base = make_batch(1, 4, seed=7)
    comp0 = PriorComponent(base.obs_disp[2].copy(), np.zeros_like(base.obs_disp[2]), 1)
    q = MemoryQueue(5, [comp0], np.ones(1), {1: 10**9, 2: 1})
    comp = init_online_component(base, q, PARAMS, CFG, noise_seed=8, task_id=2)
    np.testing.assert_array_equal(comp.U, base.obs_disp[2])


# -- offline init ---------------------------------------------------------------------


def test_offline_k1_returns_medoid():
    batch = make_batch(2, 3, seed=9)
    comps = init_offline_components(batch, 1, PARAMS, CFG, seed=10, task_id=1)
    assert len(comps) == 1
    posts = encode_context(batch, PARAMS, CFG)
    emb = np.stack([p.mean for p in posts])
    center = emb.mean(axis=0)
    medoid = int(np.argmin(np.linalg.norm(emb - center, axis=1)))
    np.testing.assert_array_equal(comps[0].U, batch.obs_disp[medoid])


def test_offline_two_separated_clusters():
    # two groups of scenes far apart in input space -> embeddings separate
    b1 = make_batch(2, 2, seed=11, scale=0.05)
    b2 = make_batch(2, 2, seed=12, scale=1.5)
    batch = TrajectoryBatch(
        np.concatenate([b1.obs_disp, b2.obs_disp]),
        np.concatenate([b1.last_pos, b2.last_pos]),
        np.concatenate([b1.fut_disp, b2.fut_disp]),
        np.concatenate([b1.fut_pos, b2.fut_pos]),
        np.concatenate([b1.scene_index, b2.scene_index + 10]),
    )
    comps = init_offline_components(batch, 2, PARAMS, CFG, seed=13, task_id=1)
    assert len(comps) == 2
    # one medoid from each half
    halves = []
    for comp in comps:
        match = [i for i in range(batch.n_agents) if np.array_equal(comp.U, batch.obs_disp[i])]
        halves.append(match[0] < b1.n_agents)
    assert sorted(halves) == [False, True]


def test_offline_k_equals_n_every_agent_its_own_medoid():
    batch = make_batch(1, 4, seed=14)
    comps = init_offline_components(batch, 4, PARAMS, CFG, seed=15, task_id=1)
    got = sorted(tuple(c.U[0]) for c in comps)
    want = sorted(tuple(u[0]) for u in batch.obs_disp)
    np.testing.assert_allclose(got, want)


def test_offline_too_few_trajectories():
    batch = make_batch(1, 2, seed=16)
    with pytest.raises(ValueError):
        init_offline_components(batch, 3, PARAMS, CFG, seed=17, task_id=1)


# -- component optimization -------------------------------------------------------------


def test_optimize_component_zero_steps_unchanged():
    q = make_queue(2)
    comp = make_component(20)
    out = optimize_component(comp, q, make_batch(1, 2, seed=21), PARAMS, CFG, steps=0, seed=22)
    np.testing.assert_array_equal(out.U, comp.U)
    np.testing.assert_array_equal(out.eps, comp.eps)


def _encode_one(comp, params, cfg):
    from contraj.model import encode_pseudo_features

    mu, std, _ = encode_pseudo_features(params, None, [comp.feature()], cfg)
    return DiagGaussian(mu.value[0], std.value[0])


def test_optimize_component_entropy_grows_when_target_is_reference():
    cfg = ModelConfig(latent_dim=2, hidden_dim=8, mc_samples=64)
    params = init_model(cfg, seed=30)
    q = make_queue(2)
    comp = make_component(23)
    mix = materialize(MemoryQueue(5, q.components, q.weights, q.counts), params, cfg)
    before = gauss_entropy(_encode_one(comp, params, cfg))
    out = optimize_component(
        comp, q, None, params, cfg, steps=10, lr=1e-2, seed=24, target=mix, reference_mixture=mix
    )
    after = gauss_entropy(_encode_one(out, params, cfg))
    assert after > before


def test_optimize_component_moves_toward_target_1d():
    cfg = ModelConfig(latent_dim=1, hidden_dim=8, mc_samples=64)
    params = init_model(cfg, seed=31)
    q = make_queue(1)
    comp = make_component(25)
    target = single_component(DiagGaussian([3.0], [1.0]))
    reference = single_component(DiagGaussian([0.0], [1.0]))
    means = [float(_encode_one(comp, params, cfg).mean[0])]
    cur = comp
    for step in range(8):
        cur = optimize_component(
            cur, q, None, params, cfg, steps=1, lr=1e-2, seed=26 + step,
            target=target, reference_mixture=reference,
        )
        means.append(float(_encode_one(cur, params, cfg).mean[0]))
    diffs = np.diff(means)
    assert np.all(diffs > 0), means  # strictly toward +3


# -- weight optimization -------------------------------------------------------------------


def _separated_setup(seed):
    """Queue component and new component with well-separated posteriors."""
    params = init_model(CFG, seed=40)
    params.params["ctx.mu.W"][...] *= 8.0
    qcomp = PriorComponent(np.full((7, 2), 0.6), np.zeros((7, 2)), 1)
    ncomp = PriorComponent(np.full((7, 2), -0.6), np.zeros((7, 2)), 2)
    q = MemoryQueue(5, [qcomp], np.ones(1), {1: 50, 2: 50})
    return params, q, ncomp


def test_optimize_weight_all_mass_to_queue():
    params, q, ncomp = _separated_setup(0)
    target = materialize(q, params, CFG)
    alpha = optimize_weight(q, ncomp, target, params, CFG, seed=1)
    assert alpha == 1.0


def test_optimize_weight_all_mass_to_new():
    params, q, ncomp = _separated_setup(0)
    from contraj.model import encode_pseudo_features

    mu, std, _ = encode_pseudo_features(params, None, [ncomp.feature()], CFG)
    target = single_component(DiagGaussian(mu.value[0], std.value[0]))
    alpha = optimize_weight(q, ncomp, target, params, CFG, seed=2)
    assert alpha == 0.0


def test_optimize_weight_half_half_construction():
    params, q, ncomp = _separated_setup(0)
    mix = materialize(q, params, CFG)
    new_post = _encode_one(ncomp, params, CFG)
    target = GaussianMixture((mix.components[0], new_post), [0.5, 0.5])
    alphas = [optimize_weight(q, ncomp, target, params, CFG, seed=s) for s in range(10)]
    assert all(abs(a - 0.5) <= 0.05 for a in alphas), alphas


def test_optimize_weight_result_attains_grid_minimum():
    params, q, ncomp = _separated_setup(0)
    mix = materialize(q, params, CFG)
    new_post = _encode_one(ncomp, params, CFG)
    target = GaussianMixture((mix.components[0], new_post), [0.3, 0.7])
    seed = 5
    alpha = optimize_weight(q, ncomp, target, params, CFG, seed=seed)
    # re-evaluate the whole grid with the same sample draw
    rng = np.random.default_rng(seed)
    n = max(CFG.mc_samples, 128)
    xs = mixture_sample(target, n, rng)
    lp_t = batch_mixture_log_prob(target, xs)
    lp_m = batch_mixture_log_prob(mix, xs)
    lp_n = batch_mixture_log_prob(single_component(new_post), xs)
    grid = np.round(np.linspace(0, 1, 101), 2)
    with np.errstate(divide="ignore"):
        kls = [np.mean(lp_t - np.logaddexp(np.log(a) + lp_m, np.log(1 - a) + lp_n)) for a in grid]
    assert alpha == grid[int(np.argmin(kls))]


# -- pruning -----------------------------------------------------------------------------


def test_prune_noop_when_under_capacity():
    q = make_queue(3, gamma=5)
    before = list(q.components)
    prune(q, PARAMS, CFG)
    assert q.components == before


def test_select_prune_index_spec_example():
    # components at means 0, 0.01, 5 with unit std: closest pair is the
    # first two; the 0.01 member sits closer to the outlier, so it goes
    vecs = np.array([[0.0, 1.0], [0.01, 1.0], [5.0, 1.0]])
    assert select_prune_index(vecs) == 1


def _prune_reference(vecs_fn, components, weights, gamma):
    """Independent exhaustive pruner over component index sets."""
    keep = list(range(len(components)))
    while len(keep) > gamma:
        vecs = vecs_fn(keep)
        best = None
        for a, b in itertools.combinations(range(len(keep)), 2):
            s = float(np.sum((vecs[a] - vecs[b]) ** 2))
            if best is None or s < best[0]:
                best = (s, a, b)
        _, a, b = best
        others = [j for j in range(len(keep)) if j not in (a, b)]
        sum_a = sum(float(np.sum((vecs[a] - vecs[j]) ** 2)) for j in others)
        sum_b = sum(float(np.sum((vecs[b] - vecs[j]) ** 2)) for j in others)
        drop = a if sum_a <= sum_b else b
        keep.pop(drop)
    w = np.array([weights[i] for i in keep])
    return keep, w / w.sum()


def test_prune_matches_exhaustive_reference():
    rng = np.random.default_rng(77)
    for case in range(200):
        n = int(rng.integers(2, 9))
        gamma = int(rng.integers(2, 7))
        comps = [make_component(1000 + case * 10 + i, task_id=1, scale=0.5) for i in range(n)]
        weights = rng.uniform(0.1, 1.0, n)
        weights /= weights.sum()
        q = MemoryQueue(gamma, list(comps), weights.copy(), {1: 10})
        prune(q, PARAMS, CFG)

        full_q = MemoryQueue(n, list(comps), weights.copy(), {1: 10})
        mix = materialize(full_q, PARAMS, CFG)
        all_vecs = np.concatenate([mix.means(), mix.stds()], axis=1)
        keep, ref_w = _prune_reference(lambda idx: all_vecs[idx], comps, weights, gamma)

        assert len(q) == min(n, gamma)
        assert [id(c) for c in q.components] == [id(comps[i]) for i in keep]
        np.testing.assert_allclose(q.weights, ref_w, atol=1e-12)


# -- persistence ---------------------------------------------------------------------------


def test_queue_roundtrip(tmp_path):
    q = make_queue(3, gamma=7, counts={1: 42, 2: 17})
    q.weights = np.array([0.5, 0.3, 0.2])
    path = tmp_path / "queue.json"
    save_queue(q, path)
    back = load_queue(path)
    assert back.gamma == 7
    assert back.counts == {1: 42, 2: 17}
    np.testing.assert_allclose(back.weights, q.weights)
    for a, b in zip(q.components, back.components):
        np.testing.assert_array_equal(a.U, b.U)
        np.testing.assert_array_equal(a.eps, b.eps)
        assert (a.task_id, a.creation_epoch) == (b.task_id, b.creation_epoch)


def test_queue_load_truncated_rejected(tmp_path):
    q = make_queue(2)
    path = tmp_path / "queue.json"
    save_queue(q, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ValueError, match="malformed"):
        load_queue(path)


def test_queue_load_negative_weight_rejected(tmp_path):
    q = make_queue(2)
    path = tmp_path / "queue.json"
    save_queue(q, path)
    import json

    payload = json.loads(path.read_text())
    payload["weights"] = [1.5, -0.5]
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError):
        load_queue(path)


def test_queue_load_wrong_schema_rejected(tmp_path):
    import json

    path = tmp_path / "queue.json"
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ValueError, match="schema"):
        load_queue(path)
