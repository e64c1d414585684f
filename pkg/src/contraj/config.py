"""Flat key=value run configuration with override and manifest round-trip.

Every run writes a manifest echoing the fully-resolved configuration;
loading that manifest reproduces the run.  Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .engine import TrainConfig
from .model import ModelConfig


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    tasks: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (section, attribute, parser)
_SPEC: dict[str, tuple[str, str, object]] = {
    "data_dir": ("run", "data_dir", str),
    "out_dir": ("run", "out_dir", str),
    "tasks": ("run", "tasks", lambda s: [t for t in s.split(",") if t]),
    "seed": ("train", "seed", int),
    "mode": ("train", "mode", str),
    "epochs_per_task": ("train", "epochs_per_task", int),
    "batch_size": ("train", "batch_size", int),
    "gamma": ("train", "gamma", int),
    "lr": ("train", "lr", float),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "disable_sym_kl": ("train", "disable_sym_kl", _parse_bool),
    "disable_weight_opt": ("train", "disable_weight_opt", _parse_bool),
    "disable_intervention": ("train", "disable_intervention", _parse_bool),
    "fixed_prior": ("train", "fixed_prior", _parse_bool),
    "pretrain_epochs": ("train", "pretrain_epochs", int),
    "offline_clusters": ("train", "offline_clusters", int),
    "component_steps": ("train", "component_steps", int),
    "component_lr": ("train", "component_lr", float),
    "best_of": ("train", "best_of", int),
    "obs_len": ("model", "obs_len", int),
    "pred_len": ("model", "pred_len", int),
    "latent_dim": ("model", "latent_dim", int),
    "hidden_dim": ("model", "hidden_dim", int),
    "lambda_pred": ("model", "lambda_pred", float),
    "lambda_rec": ("model", "lambda_rec", float),
    "lambda_kl": ("model", "lambda_kl", float),
    "lambda_sym": ("model", "lambda_sym", float),
    "mc_samples": ("model", "mc_samples", int),
}


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}: line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_kv_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv_text(fh.read(), source=str(path))


def apply_overrides(mapping: dict[str, str], sets) -> dict[str, str]:
    out = dict(mapping)
    for item in sets or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_run_config(mapping: dict[str, str]) -> RunConfig:
    unknown = sorted(set(mapping) - set(_SPEC))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    sections = {"run": {}, "train": {}, "model": {}}
    for key, raw in mapping.items():
        section, attr, parser = _SPEC[key]
        try:
            sections[section][attr] = parser(raw)
        except ValueError as exc:
            raise ValueError(f"config key {key}: {exc}") from None
    model = ModelConfig(**sections["model"])
    train = TrainConfig(model=model, **sections["train"])
    rc = RunConfig(train=train, **sections["run"])
    rc.train.task_order = list(rc.tasks)
    return rc


def flatten_run_config(rc: RunConfig) -> dict[str, str]:
    """Fully-resolved flat mapping; round-trips through build_run_config."""
    out = {}
    for key, (section, attr, _) in _SPEC.items():
        obj = {"run": rc, "train": rc.train, "model": rc.train.model}[section]
        out[key] = _fmt(getattr(obj, attr))
    return out


def config_echo(train: TrainConfig) -> dict[str, str]:
    """Flat view of a TrainConfig (+model) for reports and checkpoints."""
    rc = RunConfig(train=train, tasks=list(train.task_order))
    return flatten_run_config(rc)


def write_manifest(path, mapping: dict[str, str]) -> None:
    with open(path, "w") as fh:
        for key in _SPEC:
            if key in mapping:
                fh.write(f"{key} = {mapping[key]}\n")


# -- dataset generation config -------------------------------------------------


@dataclass
class GenConfig:
    out_dir: str = "data"
    min_distance: list = field(default_factory=lambda: [0.4])
    n_scenes: int = 1429
    n_agents: int = 5
    speed: float = 0.25
    seed: int = 0
    obs_len: int = 8
    pred_len: int = 12


_GEN_SPEC: dict[str, tuple[str, object]] = {
    "out_dir": ("out_dir", str),
    "min_distance": ("min_distance", lambda s: [float(t) for t in s.split(",") if t]),
    "n_scenes": ("n_scenes", int),
    "n_agents": ("n_agents", int),
    "speed": ("speed", float),
    "seed": ("seed", int),
    "obs_len": ("obs_len", int),
    "pred_len": ("pred_len", int),
}


def build_gen_config(mapping: dict[str, str]) -> GenConfig:
    unknown = sorted(set(mapping) - set(_GEN_SPEC))
    if unknown:
        raise ValueError(f"unknown gen-data keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in mapping.items():
        attr, parser = _GEN_SPEC[key]
        kwargs[attr] = parser(raw)
    return GenConfig(**kwargs)
