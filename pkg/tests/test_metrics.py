"""ADE/FDE, best-of-k, forgetting, latent export."""

import numpy as np
import pytest

from contraj.data import TrajectoryScene, generate_circle_crossing
from contraj.metrics import (
    ade,
    average_over_seen,
    best_of_k,
    evaluate_scenes,
    export_latents,
    fde,
    forgetting_matrix,
    latent_separation_ratio,
    read_metrics_csv,
    write_metrics_csv,
)
from contraj.model import ModelConfig, TrajectoryBatch, init_model, predict

CFG = ModelConfig(latent_dim=4, hidden_dim=8)
PARAMS = init_model(CFG, seed=0)


def toy_batch(n_scenes=2, n_agents=3, seed=0):
    rng = np.random.default_rng(seed)
    scenes = [
        TrajectoryScene(i, rng.normal(scale=0.2, size=(n_agents, 20, 2)).cumsum(axis=1), list(range(n_agents)))
        for i in range(n_scenes)
    ]
    return TrajectoryBatch.from_scenes(scenes, 8, 12)


def test_ade_basic_cases():
    gt = np.zeros((12, 2))
    assert ade(gt, gt) == 0.0
    offset = gt + np.array([1.0, 0.0])
    assert ade(offset, gt) == pytest.approx(1.0)
    dev = gt.copy()
    dev[-1] = [0.0, 2.0]
    assert ade(dev, gt) == pytest.approx(2.0 / 12)
    with pytest.raises(ValueError):
        ade(np.zeros((11, 2)), gt)


def test_fde_basic_cases():
    gt = np.zeros((12, 2))
    assert fde(gt, gt) == 0.0
    assert fde(gt + np.array([1.0, 0.0]), gt) == pytest.approx(1.0)
    dev = gt.copy()
    dev[-1] = [0.0, 2.0]
    assert fde(dev, gt) == pytest.approx(2.0)


def test_ade_bounded_by_max_frame_distance_and_fde_is_last():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(12, 2))
    gt = rng.normal(size=(12, 2))
    per_frame = np.linalg.norm(pred - gt, axis=1)
    assert ade(pred, gt) <= per_frame.max() + 1e-12
    assert fde(pred, gt) == pytest.approx(per_frame[-1])


def test_best_of_1_equals_single_sample_metric():
    batch = toy_batch(1, 2, seed=2)
    a, f = best_of_k(batch, PARAMS, CFG, k=1, seed=3)
    preds = predict(batch, PARAMS, CFG, 1, np.random.default_rng(3))
    for i in range(batch.n_agents):
        assert a[i] == pytest.approx(ade(preds[i, 0], batch.fut_pos[i]))
        assert f[i] == pytest.approx(fde(preds[i, 0], batch.fut_pos[i]))


def test_best_of_k_matches_bruteforce():
    batch = toy_batch(5, 2, seed=4)
    a, f = best_of_k(batch, PARAMS, CFG, k=20, seed=5)
    preds = predict(batch, PARAMS, CFG, 20, np.random.default_rng(5))
    for i in range(batch.n_agents):
        ades = [ade(preds[i, j], batch.fut_pos[i]) for j in range(20)]
        best = int(np.argmin(ades))
        assert a[i] == pytest.approx(ades[best])
        assert f[i] == pytest.approx(fde(preds[i, best], batch.fut_pos[i]))


def test_best_of_k_monotone_under_nested_samples():
    batch = toy_batch(3, 2, seed=6)
    # same rng stream: the first k samples of a longer draw are not nested
    # across calls, so check the exact property on one prediction tensor
    preds = predict(batch, PARAMS, CFG, 20, np.random.default_rng(7))
    dists = np.linalg.norm(preds - batch.fut_pos[:, None, :, :], axis=3).mean(axis=2)
    for k in (1, 5, 10, 20):
        sub = dists[:, :k].min(axis=1)
        full = dists.min(axis=1)
        assert np.all(full <= sub + 1e-15)


def test_evaluation_purity():
    batch = toy_batch(2, 2, seed=8)
    before = PARAMS.fingerprint()
    best_of_k(batch, PARAMS, CFG, k=4, seed=9)
    assert PARAMS.fingerprint() == before


# -- metrics csv + forgetting ------------------------------------------------------


def test_metrics_roundtrip(tmp_path):
    rows = [(1, 1, "test", 0.123456789, 0.4, 7), (2, 1, "val", 0.2, 0.5, 7)]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    back = read_metrics_csv(path)
    assert back[0]["ade"] == pytest.approx(0.123457)
    assert back[1]["split"] == "val"
    assert back[0]["seed"] == 7


def _rows(entries):
    return [
        {"after_task": a, "eval_task": e, "split": "test", "ade": v, "fde": v, "seed": 0}
        for a, e, v in entries
    ]


def test_forgetting_single_task_zero():
    rows = _rows([(1, 1, 0.1)])
    assert forgetting_matrix(rows) == {1: 0.0}


def test_forgetting_monotone_improvement_zero():
    rows = _rows([(1, 1, 0.3), (2, 1, 0.2), (2, 2, 0.4)])
    out = forgetting_matrix(rows)
    assert out[1] == pytest.approx(0.0)
    assert out[2] == pytest.approx(0.0)


def test_forgetting_synthetic_csv(tmp_path):
    rows = _rows([(1, 1, 0.10), (2, 1, 0.15), (2, 2, 0.30)])
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [(r["after_task"], r["eval_task"], "test", r["ade"], r["fde"], 0) for r in rows])
    out = forgetting_matrix(path)
    assert out[1] == pytest.approx(0.05)


def test_forgetting_missing_pairs_rejected():
    rows = _rows([(2, 2, 0.3)])
    with pytest.raises(ValueError):
        forgetting_matrix(_rows([(1, 1, 0.1)]) + rows[:0])  # missing final row for task 1
    with pytest.raises(ValueError):
        forgetting_matrix([r for r in _rows([(1, 1, 0.1), (2, 2, 0.2)])])


def test_average_over_seen():
    rows = _rows([(1, 1, 0.1), (2, 1, 0.2), (2, 2, 0.4)])
    out = average_over_seen(rows)
    assert out[1]["ade"] == pytest.approx(0.1)
    assert out[2]["ade"] == pytest.approx(0.3)
    assert out[2]["n_tasks"] == 2


# -- latent export --------------------------------------------------------------------


def test_export_latents_rows_and_columns(tmp_path):
    cfg = ModelConfig(latent_dim=2, hidden_dim=8)
    params = init_model(cfg, seed=10)
    tasks = [generate_circle_crossing(10, 3, d, seed=11) for d in (0.3, 0.5)]
    path = tmp_path / "latents.csv"
    export_latents(params, cfg, tasks, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "task_id,agent_id,c1,c2"
    n_agents = sum(sum(s.n_agents for s in t.test) for t in tasks)
    assert len(lines) == 1 + n_agents
    # deterministic re-export
    path2 = tmp_path / "latents2.csv"
    export_latents(params, cfg, tasks, path2)
    assert path.read_text() == path2.read_text()
    assert latent_separation_ratio(path) > 0
