"""Sequential task training with min-max alternation and a component schedule.

One task at a time: seed (online) or cluster (offline) prior components at
the first epoch, take one optimizer step per minibatch on the maximization
loss, fire component acquisition/refinement on the epoch schedule, prune
the queue at each task boundary, then evaluate on every task seen so far.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import memory as mem
from .autodiff import Tape, backward
from .data import TaskDomain
from .gaussian import DiagGaussian, GaussianMixture
from .metrics import evaluate_scenes, write_metrics_csv
from .model import ModelConfig, TrajectoryBatch, init_model, max_step_loss
from .nn import ParamStore, adam_step

CHECKPOINT_SCHEMA_VERSION = 1

# spawn-key purpose codes for derived random streams
_SHUFFLE, _BATCH, _COMP_INIT, _COMP_OPT, _WEIGHT, _EVAL, _FIRE_SAMPLE = range(7)


@dataclass
class TrainConfig:
    epochs_per_task: int = 50
    batch_size: int = 32
    mode: str = "online"
    gamma: int = 45
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    disable_sym_kl: bool = False
    disable_weight_opt: bool = False
    disable_intervention: bool = False
    fixed_prior: bool = False
    pretrain_epochs: int = 20
    offline_clusters: int = 5
    component_steps: int = 10
    component_lr: float = 1e-2
    best_of: int = 20
    task_order: list = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs_per_task < 1 or self.gamma < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_task, gamma, batch_size must be >= 1")
        if self.mode not in ("online", "offline"):
            raise ValueError(f"mode must be online or offline, got {self.mode!r}")

    @property
    def intervention(self) -> bool:
        return not self.disable_intervention and not self.fixed_prior


@dataclass
class TaskReport:
    task_index: int
    task_name: str
    epoch_losses: list = field(default_factory=list)
    components_added: int = 0
    prunes_performed: int = 0
    wall_seconds: float = 0.0
    final_val_ade: float = float("nan")
    final_val_fde: float = float("nan")
    queue_len_end: int = 0


@dataclass
class SequenceReport:
    task_order: list
    config_echo: dict
    task_reports: list = field(default_factory=list)
    metrics_path: str = ""
    checkpoint_paths: list = field(default_factory=list)
    queue_len_at_boundaries: list = field(default_factory=list)

    def to_json(self) -> str:
        def enc(o):
            if dataclasses.is_dataclass(o) and not isinstance(o, type):
                return dataclasses.asdict(o)
            raise TypeError(type(o))

        return json.dumps(dataclasses.asdict(self), default=enc, indent=2)


def component_schedule(epoch: int, epochs_per_task: int, gamma: int) -> bool:
    """True when the epoch index hits the acquisition period
    floor(L / floor(2*gamma)), clamped to at least one epoch."""
    if not 1 <= epoch <= epochs_per_task:
        raise ValueError(f"epoch {epoch} outside [1, {epochs_per_task}]")
    period = max(1, epochs_per_task // max(1, int(2 * gamma)))
    return epoch % period == 0


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _batches(task: TaskDomain, config: TrainConfig, rng: np.random.Generator):
    scenes = task.train
    order = rng.permutation(len(scenes))
    for start in range(0, len(scenes), config.batch_size):
        chunk = [scenes[i] for i in order[start : start + config.batch_size]]
        yield TrajectoryBatch.from_scenes(chunk, config.model.obs_len, config.model.pred_len)


def _standard_normal_prior(d: int) -> GaussianMixture:
    return GaussianMixture((DiagGaussian(np.zeros(d), np.ones(d)),), np.ones(1))


def _effective_model_config(config: TrainConfig) -> ModelConfig:
    m = config.model
    if config.disable_intervention:
        return replace(m, lambda_kl=0.0, lambda_sym=0.0)
    if config.fixed_prior:
        return replace(m, lambda_sym=0.0)
    if config.disable_sym_kl:
        return replace(m, lambda_sym=0.0)
    return m


def pretrain(model: ParamStore, task: TaskDomain, config: TrainConfig) -> None:
    """Prediction+reconstruction-only warmup on the first task, after which
    the context encoder is initialized from the trajectory encoder."""
    cfg = replace(config.model, lambda_kl=0.0, lambda_sym=0.0)
    for epoch in range(1, config.pretrain_epochs + 1):
        rng = _rng(config.seed, 0, epoch, _SHUFFLE)
        for b, batch in enumerate(_batches(task, config, rng)):
            tape = Tape()
            noise_seed = int(_rng(config.seed, 0, epoch, b, _BATCH).integers(2**31))
            loss, _ = max_step_loss(batch, None, None, [], cfg, model, noise_seed, tape)
            backward(tape, loss)
            adam_step(model, config.lr, config.beta1, config.beta2, config.adam_eps)
    model.copy_prefix("enc", "ctx")


def _fire_online(task, task_index, epoch, model, queue, config, counters) -> None:
    rng = _rng(config.seed, task_index, epoch, _FIRE_SAMPLE)
    idx = rng.choice(len(task.train), size=min(config.batch_size, len(task.train)), replace=False)
    batch = TrajectoryBatch.from_scenes(
        [task.train[i] for i in idx], config.model.obs_len, config.model.pred_len
    )
    seed_init = int(_rng(config.seed, task_index, epoch, _COMP_INIT).integers(2**31))
    comp = mem.init_online_component(batch, queue, model, config.model, seed_init, task_index, epoch)
    seed_opt = int(_rng(config.seed, task_index, epoch, _COMP_OPT).integers(2**31))
    comp = mem.optimize_component(
        comp, queue, batch, model, config.model, config.component_steps, config.component_lr, seed_opt
    )
    if config.disable_weight_opt:
        queue.enqueue(comp)
        queue.set_uniform_weights()
    else:
        target = mem.aggregated_posterior_target(queue, batch, model, config.model)
        seed_w = int(_rng(config.seed, task_index, epoch, _WEIGHT).integers(2**31))
        alpha = mem.optimize_weight(queue, comp, target, model, config.model, seed_w)
        queue.enqueue(comp, share=1.0 - alpha)
    counters["components_added"] += 1


def _fire_offline(task, task_index, epoch, model, queue, config) -> None:
    rng = _rng(config.seed, task_index, epoch, _FIRE_SAMPLE)
    idx = rng.choice(len(task.train), size=min(config.batch_size, len(task.train)), replace=False)
    batch = TrajectoryBatch.from_scenes(
        [task.train[i] for i in idx], config.model.obs_len, config.model.pred_len
    )
    for local, qi in enumerate(queue.task_indices(task_index)):
        comp = queue.components[qi]
        seed_opt = int(_rng(config.seed, task_index, epoch, _COMP_OPT, local).integers(2**31))
        comp = mem.optimize_component(
            comp, queue, batch, model, config.model, config.component_steps, config.component_lr, seed_opt
        )
        queue.components[qi] = comp
        if not config.disable_weight_opt:
            rest = queue.without(qi)
            if len(rest) == 0:
                continue
            target = mem.aggregated_posterior_target(queue, batch, model, config.model)
            seed_w = int(_rng(config.seed, task_index, epoch, _WEIGHT, local).integers(2**31))
            alpha = mem.optimize_weight(rest, comp, target, model, config.model, seed_w)
            queue.reweight(qi, alpha)


def train_task(
    task: TaskDomain,
    task_index: int,
    model: ParamStore,
    queue: mem.MemoryQueue,
    config: TrainConfig,
) -> TaskReport:
    """One continual-learning task: Alg.-style epoch loop over minibatches."""
    if not task.train:
        raise ValueError(f"task {task.name} has an empty train split")
    t0 = time.perf_counter()
    cfg = _effective_model_config(config)
    report = TaskReport(task_index, task.name)
    counters = {"components_added": 0}
    L = config.epochs_per_task

    if config.intervention:
        n_agents = sum(s.n_agents for s in task.train)
        queue.counts[task_index] = n_agents

    for epoch in range(1, L + 1):
        if epoch == 1 and config.intervention:
            if config.mode == "online":
                _seed_online(task, task_index, model, queue, config, counters)
            else:
                _seed_offline(task, task_index, model, queue, config, counters)

        prev_prior = None
        pseudo_feats: list = []
        if config.intervention:
            prev_idx = [i for i, c in enumerate(queue.components) if c.task_id < task_index]
            cur_idx = queue.task_indices(task_index)
            if prev_idx and cfg.lambda_sym > 0:
                prev_view = mem.MemoryQueue(
                    queue.gamma,
                    [queue.components[i] for i in prev_idx],
                    queue.weights[prev_idx],
                )
            else:
                prev_view = None
        shuffle_rng = _rng(config.seed, task_index, epoch, _SHUFFLE)
        parts_acc: list[dict] = []
        for b, batch in enumerate(_batches(task, config, shuffle_rng)):
            if config.intervention:
                prior = mem.materialize(queue, model, cfg)
                if prev_view is not None:
                    prev_prior = mem.materialize(prev_view, model, cfg)
                if cfg.lambda_sym > 0 and cur_idx:
                    pseudo_feats = [queue.components[i].feature() for i in cur_idx]
            elif config.fixed_prior:
                prior = _standard_normal_prior(cfg.latent_dim)
            else:
                prior = None
            tape = Tape()
            noise_seed = int(_rng(config.seed, task_index, epoch, b, _BATCH).integers(2**31))
            loss, parts = max_step_loss(
                batch, prior, prev_prior, pseudo_feats, cfg, model, noise_seed, tape
            )
            backward(tape, loss)
            adam_step(model, config.lr, config.beta1, config.beta2, config.adam_eps)
            parts_acc.append(parts)

        if (
            config.intervention
            and component_schedule(epoch, L, config.gamma)
            and not (epoch == 1 and config.mode == "online")
        ):
            if config.mode == "online":
                _fire_online(task, task_index, epoch, model, queue, config, counters)
            else:
                _fire_offline(task, task_index, epoch, model, queue, config)

        model.check_finite()
        report.epoch_losses.append(
            {k: float(np.mean([p[k] for p in parts_acc])) for k in parts_acc[0]}
        )

    eval_seed = int(_rng(config.seed, task_index, _EVAL, 0).integers(2**31))
    report.final_val_ade, report.final_val_fde = evaluate_scenes(
        task.val, model, config.model, config.best_of, eval_seed
    ) if task.val else (float("nan"), float("nan"))
    report.components_added = counters["components_added"]
    report.queue_len_end = len(queue)
    report.wall_seconds = time.perf_counter() - t0
    return report


def _seed_online(task, task_index, model, queue, config, counters) -> None:
    rng = _rng(config.seed, task_index, 1, _COMP_INIT, 1)
    idx = rng.choice(len(task.train), size=min(config.batch_size, len(task.train)), replace=False)
    batch = TrajectoryBatch.from_scenes(
        [task.train[i] for i in idx], config.model.obs_len, config.model.pred_len
    )
    seed_init = int(rng.integers(2**31))
    comp = mem.init_online_component(batch, queue, model, config.model, seed_init, task_index, 1)
    share = None if len(queue) == 0 else max(1.0 - queue.history_fraction(), 1e-3)
    queue.enqueue(comp, share=share)
    if config.disable_weight_opt:
        queue.set_uniform_weights()
    counters["components_added"] += 1


def _seed_offline(task, task_index, model, queue, config, counters) -> None:
    batch = TrajectoryBatch.from_scenes(task.train, config.model.obs_len, config.model.pred_len)
    seed = int(_rng(config.seed, task_index, 1, _COMP_INIT, 2).integers(2**31))
    comps = mem.init_offline_components(
        batch, config.offline_clusters, model, config.model, seed, task_index
    )
    share = max(1.0 - queue.history_fraction(), 1e-3)
    queue.extend(comps, total_share=share)
    if config.disable_weight_opt:
        queue.set_uniform_weights()
    counters["components_added"] += len(comps)


def run_sequence(tasks, config: TrainConfig, out_dir) -> SequenceReport:
    """Train tasks in order; after each, prune, evaluate all seen tasks on
    val and test, and checkpoint.  Writes metrics.csv and report.json."""
    if not tasks:
        raise ValueError("need at least one task")
    os.makedirs(out_dir, exist_ok=True)
    from .config import config_echo

    report = SequenceReport(task_order=[t.name for t in tasks], config_echo=config_echo(config))
    model = init_model(config.model, config.seed)
    queue = mem.MemoryQueue(config.gamma)

    if config.pretrain_epochs > 0:
        pretrain(model, tasks[0], config)

    rows = []
    for k, task in enumerate(tasks, start=1):
        try:
            task_report = train_task(task, k, model, queue, config)
        except Exception as exc:
            raise RuntimeError(f"task {task.name} (index {k}) failed: {exc}") from exc

        if config.intervention and len(queue) > queue.gamma:
            before = len(queue)
            mem.prune(queue, model, config.model)
            task_report.prunes_performed = before - len(queue)
            task_report.queue_len_end = len(queue)
        report.queue_len_at_boundaries.append(len(queue))

        for t_idx, seen in enumerate(tasks[:k], start=1):
            for split in ("val", "test"):
                scenes = seen.split(split)
                if not scenes:
                    continue
                eval_seed = int(_rng(config.seed, k, t_idx, _EVAL).integers(2**31))
                a, f = evaluate_scenes(scenes, model, config.model, config.best_of, eval_seed)
                rows.append((k, t_idx, split, a, f, config.seed))

        ckpt = os.path.join(out_dir, f"checkpoint_task{k}_seed{config.seed}.npz")
        save_checkpoint(ckpt, model, queue, config, k)
        report.checkpoint_paths.append(ckpt)
        report.task_reports.append(task_report)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, rows)
    report.metrics_path = metrics_path
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
    return report


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: ParamStore, queue: mem.MemoryQueue, config: TrainConfig, task_index: int) -> None:
    from .config import config_echo

    arrays = model.state_arrays()
    np.savez(
        path,
        schema_version=np.array([CHECKPOINT_SCHEMA_VERSION]),
        task_index=np.array([task_index]),
        config_json=np.array(json.dumps(config_echo(config))),
        queue_json=np.array(mem.queue_to_json(queue)),
        **{f"state/{k}": v for k, v in arrays.items()},
    )


def load_checkpoint(path):
    """Returns (model, queue, config_echo dict, task_index)."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["schema_version"][0])
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema: {version}")
        arrays = {k[len("state/") :]: data[k] for k in data.files if k.startswith("state/")}
        model = ParamStore.from_state_arrays(arrays)
        queue = mem.queue_from_json(str(data["queue_json"]))
        echo = json.loads(str(data["config_json"]))
        task_index = int(data["task_index"][0])
    return model, queue, echo, task_index
