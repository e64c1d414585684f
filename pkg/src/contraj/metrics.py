"""Displacement metrics, best-of-k evaluation, forgetting, latent export."""

from __future__ import annotations

import csv

import numpy as np

from .model import ModelConfig, TrajectoryBatch, encode_context, predict
from .nn import ParamStore

METRICS_HEADER = ["after_task", "eval_task", "split", "ade", "fde", "seed"]


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over frames of the Euclidean distance per frame (meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean distance at the final frame (meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_k(
    batch: TrajectoryBatch,
    params: ParamStore,
    config: ModelConfig,
    k: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent (ade, fde) of the minimum-ADE sample among k decodes.

    The FDE reported is that of the same chosen sample, not the best FDE.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    preds = predict(batch, params, config, k, rng)  # (A, k, T, 2)
    dists = np.linalg.norm(preds - batch.fut_pos[:, None, :, :], axis=3)  # (A, k, T)
    ades = dists.mean(axis=2)
    best = np.argmin(ades, axis=1)
    rows = np.arange(batch.n_agents)
    return ades[rows, best], dists[rows, best, -1]


def evaluate_scenes(
    scenes,
    params: ParamStore,
    config: ModelConfig,
    k: int,
    seed: int,
) -> tuple[float, float]:
    """Mean best-of-k ADE/FDE over all agents of a scene list."""
    batch = TrajectoryBatch.from_scenes(scenes, config.obs_len, config.pred_len)
    a, f = best_of_k(batch, params, config, k, seed)
    return float(a.mean()), float(f.mean())


def write_metrics_csv(path, rows) -> None:
    """Rows of (after_task, eval_task, split, ade, fde, seed), 6 decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for after, eval_task, split, a, f, seed in rows:
            writer.writerow([after, eval_task, split, f"{a:.6f}", f"{f:.6f}", seed])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header: {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(
                {
                    "after_task": int(row["after_task"]),
                    "eval_task": int(row["eval_task"]),
                    "split": row["split"],
                    "ade": float(row["ade"]),
                    "fde": float(row["fde"]),
                    "seed": int(row["seed"]),
                }
            )
        return out


def forgetting_matrix(rows, split: str = "test", metric: str = "ade") -> dict[int, float]:
    """Per-task forgetting: final-checkpoint error minus the best error any
    checkpoint at or after the task achieved on it.  Accepts a CSV path or
    parsed rows."""
    if isinstance(rows, (str, bytes)) or hasattr(rows, "__fspath__"):
        rows = read_metrics_csv(rows)
    rows = [r for r in rows if r["split"] == split]
    if not rows:
        raise ValueError(f"no rows for split {split!r}")
    last = max(r["after_task"] for r in rows)
    tasks = sorted({r["eval_task"] for r in rows})
    table: dict[tuple[int, int], float] = {}
    for r in rows:
        table[(r["after_task"], r["eval_task"])] = r[metric]
    out = {}
    for t in tasks:
        history = [table[(s, t)] for s in range(t, last + 1) if (s, t) in table]
        if (last, t) not in table or not history:
            raise ValueError(f"missing (after={last}, eval={t}) pair")
        out[t] = table[(last, t)] - min(history)
    return out


def average_over_seen(rows, split: str = "test") -> dict[int, dict[str, float]]:
    """Mean ADE/FDE across all tasks seen up to each checkpoint."""
    rows = [r for r in rows if r["split"] == split]
    out: dict[int, dict[str, float]] = {}
    for after in sorted({r["after_task"] for r in rows}):
        seen = [r for r in rows if r["after_task"] == after and r["eval_task"] <= after]
        out[after] = {
            "ade": float(np.mean([r["ade"] for r in seen])),
            "fde": float(np.mean([r["fde"] for r in seen])),
            "n_tasks": len(seen),
        }
    return out


def export_latents(params: ParamStore, config: ModelConfig, tasks, path, split: str = "test") -> None:
    """CSV of context-posterior means, one row per test agent:
    task_id, agent_id, c1..cd."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "agent_id"] + [f"c{i + 1}" for i in range(config.latent_dim)])
        for task_id, task in enumerate(tasks, start=1):
            scenes = task.split(split)
            batch = TrajectoryBatch.from_scenes(scenes, config.obs_len, config.pred_len)
            posts = encode_context(batch, params, config)
            for agent_id, post in enumerate(posts):
                writer.writerow(
                    [task_id, agent_id] + [f"{v:.9g}" for v in post.mean]
                )


def latent_separation_ratio(path) -> float:
    """Mean inter-task centroid distance over mean intra-task dispersion."""
    tasks: dict[int, list[np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        dims = [k for k in reader.fieldnames if k.startswith("c")]
        for row in reader:
            vec = np.array([float(row[k]) for k in dims])
            tasks.setdefault(int(row["task_id"]), []).append(vec)
    cents = {t: np.mean(vs, axis=0) for t, vs in tasks.items()}
    ids = sorted(tasks)
    inter = [
        np.linalg.norm(cents[a] - cents[b]) for i, a in enumerate(ids) for b in ids[i + 1 :]
    ]
    intra = [np.linalg.norm(v - cents[t]) for t in ids for v in tasks[t]]
    return float(np.mean(inter) / max(np.mean(intra), 1e-12))
