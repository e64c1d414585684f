"""Command-line entry point: dataset generation, training, evaluation, exports."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _add_set(parser):
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contraj")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic circle-crossing task domains")
    p.add_argument("--out", default=None, help="dataset directory (overrides out_dir)")
    _add_set(p)

    p = sub.add_parser("train", help="run the continual-learning task sequence")
    p.add_argument("--config", default=None, help="flat key=value config file")
    _add_set(p)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on given tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="metrics CSV path")
    _add_set(p)

    p = sub.add_parser("export-latents", help="export context-posterior means to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_set(p)

    p = sub.add_parser("report", help="print average-over-seen-tasks block from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None, help="also write the block as CSV")
    p.add_argument("--split", default="test", choices=["val", "test"])
    return parser


def _load_tasks(rc):
    from .data import load_trajectory_file

    if not rc.tasks:
        raise ValueError("no tasks configured (set tasks=name1,name2,...)")
    tasks = []
    for name in rc.tasks:
        path = os.path.join(rc.data_dir, f"{name}.txt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"task file not found: {path}")
        tasks.append(
            load_trajectory_file(path, rc.train.model.obs_len, rc.train.model.pred_len)
        )
    return tasks


def cmd_gen_data(args) -> int:
    from .config import apply_overrides, build_gen_config
    from .data import export_trajectory_file, generate_circle_crossing

    mapping = apply_overrides({}, args.sets)
    if args.out is not None:
        mapping["out_dir"] = args.out
    gen = build_gen_config(mapping)
    os.makedirs(gen.out_dir, exist_ok=True)
    for d in gen.min_distance:
        domain = generate_circle_crossing(
            gen.n_scenes, gen.n_agents, d, gen.speed, gen.seed, gen.obs_len, gen.pred_len
        )
        path = os.path.join(gen.out_dir, f"{domain.name}.txt")
        export_trajectory_file(domain, path, trim=gen.obs_len + gen.pred_len)
        print(f"wrote {path}: {len(domain.all_scenes())} scenes "
              f"({len(domain.train)}/{len(domain.val)}/{len(domain.test)} train/val/test)")
    return 0


def cmd_train(args) -> int:
    from .config import (
        apply_overrides,
        build_run_config,
        flatten_run_config,
        parse_kv_file,
        write_manifest,
    )
    from .engine import run_sequence

    mapping = parse_kv_file(args.config) if args.config else {}
    mapping = apply_overrides(mapping, args.sets)
    rc = build_run_config(mapping)
    tasks = _load_tasks(rc)
    os.makedirs(rc.out_dir, exist_ok=True)
    write_manifest(os.path.join(rc.out_dir, "manifest.cfg"), flatten_run_config(rc))
    report = run_sequence(tasks, rc.train, rc.out_dir)
    print(f"trained {len(tasks)} tasks; metrics at {report.metrics_path}")
    return 0


def _restore(checkpoint, sets):
    from .config import apply_overrides, build_run_config
    from .engine import load_checkpoint

    model, queue, echo, task_index = load_checkpoint(checkpoint)
    mapping = apply_overrides(echo, sets)
    rc = build_run_config(mapping)
    return model, queue, rc, task_index


def cmd_eval(args) -> int:
    from .metrics import evaluate_scenes, write_metrics_csv

    model, _, rc, task_index = _restore(args.checkpoint, args.sets)
    tasks = _load_tasks(rc)
    rows = []
    for t_idx, task in enumerate(tasks, start=1):
        for split in ("val", "test"):
            scenes = task.split(split)
            if not scenes:
                continue
            seed = int(
                np.random.default_rng(
                    np.random.SeedSequence(rc.train.seed, spawn_key=(task_index, t_idx, 5))
                ).integers(2**31)
            )
            a, f = evaluate_scenes(scenes, model, rc.train.model, rc.train.best_of, seed)
            rows.append((task_index, t_idx, split, a, f, rc.train.seed))
    out = args.out or os.path.join(rc.out_dir, f"metrics_eval_task{task_index}.csv")
    write_metrics_csv(out, rows)
    print(f"wrote {out}")
    return 0


def cmd_export_latents(args) -> int:
    from .metrics import export_latents

    model, _, rc, _ = _restore(args.checkpoint, args.sets)
    tasks = _load_tasks(rc)
    export_latents(model, rc.train.model, tasks, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    import csv

    from .metrics import average_over_seen, read_metrics_csv

    rows = read_metrics_csv(args.metrics)
    table = average_over_seen(rows, split=args.split)
    print(f"average over seen tasks ({args.split} split)")
    print(f"{'after_task':>10} {'n_tasks':>8} {'ade':>10} {'fde':>10}")
    for after, vals in table.items():
        print(f"{after:>10} {vals['n_tasks']:>8} {vals['ade']:>10.6f} {vals['fde']:>10.6f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["after_task", "n_tasks", "ade", "fde"])
            for after, vals in table.items():
                writer.writerow([after, vals["n_tasks"], f"{vals['ade']:.6f}", f"{vals['fde']:.6f}"])
        print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-latents": cmd_export_latents,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
