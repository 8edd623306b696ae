"""Command-line entry point: ``arc-nca {solve,report,frames,dataset-stats}``.

Every flag can also be set through an ``ARCNCA_<FLAG>`` environment variable
(dashes become underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .dataset import (
    N_RAW_COLORS,
    PaddingPolicy,
    TaskFormatError,
    TaskRecord,
    apply_max_padding,
    dataset_stats,
    filter_same_size,
    load_dataset,
    load_task,
)
from .engram import VARIANTS, UnknownVariantError, get_variant
from .evaluation import EvalConfig, TaskResult, summarize
from .training import TrainConfig, load_checkpoint, save_checkpoint, task_seed, train_task

ENV_PREFIX = "ARCNCA_"
MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.jsonl"
# fields that may change between a run and its resumption
RESUMABLE_FIELDS = ("workers", "force")

log = logging.getLogger("arcnca")


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    global_seed: int
    variants: list[str]
    dataset: str
    padding: str
    train: dict
    eval: dict
    workers: int
    out: str
    task_ids: Optional[list[str]] = None
    same_size_only: bool = False
    toolkit_version: str = __version__
    force: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def comparable(self) -> dict:
        d = self.to_dict()
        for k in RESUMABLE_FIELDS:
            d.pop(k, None)
        return d


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def padded_for(variant: str, padding: str) -> bool:
    return padding == "max" or get_variant(variant).padded


def select_tasks(tasks: list[TaskRecord], padded: bool, same_size_only: bool) -> list[TaskRecord]:
    if padded and not same_size_only:
        return tasks
    return filter_same_size(tasks)


def result_path(out: Path, variant: str, task_id: str) -> Path:
    return out / "results" / variant / f"{task_id}.json"


def run_job(job: dict) -> dict:
    """Train and score one (task, variant); failures become an error-status result."""
    import torch

    if job.get("single_thread"):
        torch.set_num_threads(1)
    out = Path(job["out"])
    task: TaskRecord = job["task"]
    variant = job["variant"]
    seed = task_seed(job["global_seed"], task.task_id)
    started = time.perf_counter()
    try:
        n_colors = N_RAW_COLORS
        if job["padded"]:
            task = apply_max_padding(task, PaddingPolicy("maximal_padding"))
            n_colors = N_RAW_COLORS + 1
        cfg = TrainConfig.from_dict({**job["train"], "seed": seed})
        trained = train_task(task, variant, cfg, n_colors=n_colors, log_path=out / "logs" / variant / f"{task.task_id}.jsonl")
        save_checkpoint(trained, out / "checkpoints" / variant / f"{task.task_id}.pt")
        result = _score(trained, task, job["eval"])
    except Exception as exc:  # recorded per task; the run continues
        log.exception("task %s / %s failed", task.task_id, variant)
        result = TaskResult.failed(task.task_id, variant, f"{type(exc).__name__}: {exc}", time.perf_counter() - started, seed)
    record = result.to_record()
    _atomic_write(result_path(out, variant, task.task_id), json.dumps(record, sort_keys=True) + "\n")
    return record


def _score(trained, task, eval_dict):
    from .evaluation import score_task

    return score_task(trained, task, EvalConfig.from_dict(eval_dict))


def collect_results(out: Path, variants: Optional[list[str]] = None, task_ids: Optional[dict[str, list[str]]] = None) -> list[TaskResult]:
    results_root = out / "results"
    names = variants if variants is not None else sorted(p.name for p in results_root.glob("*") if p.is_dir())
    results = []
    for v in names:
        ids = task_ids.get(v) if task_ids else None
        paths = [result_path(out, v, t) for t in ids] if ids is not None else sorted((results_root / v).glob("*.json"))
        for p in paths:
            if p.is_file():
                results.append(TaskResult.from_record(json.loads(p.read_text())))
    return results


def write_results_jsonl(path: Path, results: list[TaskResult], variant_order: list[str]) -> None:
    rank = {v: i for i, v in enumerate(variant_order)}
    ordered = sorted(results, key=lambda r: (rank.get(r.variant, len(rank)), r.variant, r.task_id))
    _atomic_write(path, "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in ordered))


def read_results(path: Path) -> list[TaskResult]:
    if path.is_dir():
        jsonl = path / RESULTS_NAME
        if jsonl.is_file():
            path = jsonl
        else:
            return collect_results(path)
    return [TaskResult.from_record(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def cmd_solve(args) -> int:
    for name in args.variants:
        get_variant(name)
    train = TrainConfig(
        iterations=args.iterations,
        rollout_steps=(args.steps_min, args.steps_max),
        fire_rate=args.fire_rate,
        alive_masking=not args.no_alive_masking,
        lr=args.lr,
    )
    thresholds = sorted(args.thresholds)
    evalc = EvalConfig(
        threshold_strict=thresholds[0],
        threshold_loose=thresholds[-1] if len(thresholds) > 1 else thresholds[0] + 1.0,
        max_eval_steps=args.max_eval_steps,
        power_watts=args.power_watts,
        price_per_kwh=args.price_per_kwh,
    )
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    tasks = load_dataset(args.dataset, args.tasks)
    if args.limit is not None:
        tasks = tasks[: args.limit]
    if not tasks:
        raise ConfigError(f"no tasks found in {args.dataset}")
    out = Path(args.out)
    manifest = RunManifest(
        global_seed=args.seed,
        variants=list(args.variants),
        dataset=str(Path(args.dataset).resolve()),
        padding=args.padding,
        train=train.to_dict(),
        eval=evalc.to_dict(),
        workers=args.workers,
        out=str(out.resolve()),
        task_ids=[t.task_id for t in tasks],
        same_size_only=args.same_size_only,
        force=args.force,
    )
    manifest_path = out / MANIFEST_NAME
    if manifest_path.is_file() and not args.force:
        previous = RunManifest.from_dict(json.loads(manifest_path.read_text()))
        if previous.comparable() != manifest.comparable():
            raise ConfigError(f"{manifest_path} was written by a different configuration; use --force or another --out")
    _atomic_write(manifest_path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")

    jobs, selected = [], {}
    for variant in args.variants:
        padded = padded_for(variant, args.padding)
        chosen = select_tasks(tasks, padded, args.same_size_only)
        selected[variant] = [t.task_id for t in chosen]
        for task in chosen:
            if not args.force and result_path(out, variant, task.task_id).is_file():
                continue
            jobs.append(
                {
                    "task": task,
                    "variant": variant,
                    "padded": padded,
                    "global_seed": args.seed,
                    "train": manifest.train,
                    "eval": manifest.eval,
                    "out": str(out),
                    "single_thread": args.workers > 1,
                }
            )
    total = sum(len(v) for v in selected.values())
    log.info("%d task/variant jobs, %d to run, %d resumed", total, len(jobs), total - len(jobs))

    if args.workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.workers, mp_context=ctx) as pool:
            for rec in pool.map(run_job, jobs):
                _log_record(rec)
    else:
        for job in jobs:
            _log_record(run_job(job))

    results = collect_results(out, list(args.variants), selected)
    write_results_jsonl(out / RESULTS_NAME, results, list(args.variants))
    if results:
        from .reporting import write_report

        report = summarize(results, evalc, args.thresholds, variant_order=args.variants)
        write_report(report, results, out / "report", figures=not args.no_figures)
    failed = sum(not r.ok for r in results)
    if failed:
        log.warning("%d task/variant jobs failed; see error fields in %s", failed, out / RESULTS_NAME)
    return 0


def _log_record(rec: dict) -> None:
    if rec["status"] == "ok":
        log.info(
            "%s %-6s ln(loss)=%7.3f strict=%s loose=%s exact=%s (%.1fs)",
            rec["task_id"], rec["variant"], rec["log_loss"], rec["solved_strict"], rec["solved_loose"], rec["exact_match"], rec["wall_time_seconds"],
        )
    else:
        log.error("%s %s failed: %s", rec["task_id"], rec["variant"], rec["error"])


def cmd_report(args) -> int:
    from .reporting import write_report, render_markdown

    source = Path(args.results_dir)
    if not source.exists():
        raise ConfigError(f"{source} does not exist")
    results = read_results(source)
    if not results:
        raise ConfigError(f"no results found in {source}")
    evalc = EvalConfig(power_watts=args.power_watts, price_per_kwh=args.price_per_kwh)
    manifest_path = (source if source.is_dir() else source.parent) / MANIFEST_NAME
    order = None
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        order = manifest.get("variants")
        if not args.explicit_cost:
            evalc = EvalConfig.from_dict(manifest["eval"])
    report = summarize(results, evalc, args.thresholds, variant_order=order)
    out = Path(args.out) if args.out else (source if source.is_dir() else source.parent) / "report"
    write_report(report, results, out, figures=not args.no_figures)
    sys.stdout.write(render_markdown(report))
    return 0


def cmd_frames(args) -> int:
    import numpy as np
    import torch

    from .codec import encode_grid
    from .engine import rollout
    from .reporting import export_frames
    from .training import to_lattice, to_tensor

    trained = load_checkpoint(args.checkpoint)
    task = load_task(args.task)
    if trained.n_colors > N_RAW_COLORS:
        task = apply_max_padding(task, PaddingPolicy("maximal_padding"))
    pairs = task.test_pairs if args.split == "test" else task.train_pairs
    if not 0 <= args.pair < len(pairs):
        raise ConfigError(f"--pair {args.pair} out of range (task has {len(pairs)} {args.split} pairs)")
    dtype = next(trained.model.parameters()).dtype
    x = to_tensor(encode_grid(pairs[args.pair].input, trained.n_colors, trained.model.channels), dtype)
    generator = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        _, traj = rollout(trained.model, x, args.steps, generator, record=True)
    paths = export_frames([to_lattice(s) for s in traj], args.out, scale=args.scale, gif=args.gif)
    print(f"wrote {len(paths)} frames to {args.out}" + (" (+ rollout.gif)" if args.gif else ""))
    return 0


def cmd_dataset_stats(args) -> int:
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    stats = dataset_stats(load_dataset(args.dataset))
    print(json.dumps(stats, indent=2))
    return 0


def _parse_variants(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arc-nca", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cost = argparse.ArgumentParser(add_help=False)
    cost.add_argument("--power-watts", type=float, default=EvalConfig.power_watts)
    cost.add_argument("--price-per-kwh", type=float, default=EvalConfig.price_per_kwh)
    cost.add_argument("--thresholds", type=float, nargs="+", default=[-7.0, -6.0])
    cost.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")

    p = sub.add_parser("solve", parents=[cost], help="train and evaluate every task x variant")
    p.add_argument("--dataset", help="directory of ARC task JSON files")
    p.add_argument("--variants", type=_parse_variants, default=["NCA", "v1", "v2", "v3", "v4"], help=f"comma list of {', '.join(VARIANTS)}")
    p.add_argument("--padding", choices=["ignore", "max"], default="ignore")
    p.add_argument("--same-size-only", action="store_true", help="with --padding max, still drop size-changing tasks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--steps-min", type=int, default=64)
    p.add_argument("--steps-max", type=int, default=96)
    p.add_argument("--fire-rate", type=float, default=TrainConfig.fire_rate)
    p.add_argument("--no-alive-masking", action="store_true")
    p.add_argument("--max-eval-steps", type=int, default=EvalConfig.max_eval_steps)
    p.add_argument("--tasks", type=_parse_variants, default=None, help="comma list of task ids")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default="runs/default")
    p.add_argument("--force", action="store_true", help="retrain tasks that already have results")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("report", parents=[cost], help="tables and figures from a results directory")
    p.add_argument("results_dir", nargs="?", default="runs/default")
    p.add_argument("--out", default=None)
    p.add_argument("--explicit-cost", action="store_true", help="use --power-watts/--price-per-kwh over the manifest")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("frames", help="export a recorded rollout as PNG frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, help="task JSON file")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--gif", action="store_true")
    p.add_argument("--out", default="frames")
    p.set_defaults(func=cmd_frames)

    p = sub.add_parser("dataset-stats", help="task counts and grid size histogram")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_dataset_stats)

    for subparser in sub.choices.values():
        _apply_env_defaults(subparser)
    return parser


def _apply_env_defaults(parser: argparse.ArgumentParser, environ=None) -> None:
    environ = os.environ if environ is None else environ
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        key = ENV_PREFIX + action.dest.upper()
        if key not in environ:
            continue
        raw = environ[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = _parse_bool(raw)
        elif action.nargs == "+":
            value = [action.type(v) if action.type else v for v in raw.replace(",", " ").split()]
        else:
            value = action.type(raw) if action.type else raw
        parser.set_defaults(**{action.dest: value})
        action.required = False


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UnknownVariantError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ConfigError, TaskFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
