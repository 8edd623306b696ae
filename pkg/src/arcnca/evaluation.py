"""Scoring trained automata on held-out test pairs, unions and run summaries.

All log losses are natural logarithms of the pixelwise MSE.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .codec import decode_lattice, encode_grid
from .dataset import TaskRecord
from .engine import CellularAutomaton
from .training import TrainedModel, pixelwise_mse, to_lattice, to_tensor

RESULT_SCHEMA = "arcnca.task_result/1"
LOG_FLOOR = -30.0
# union reported alongside the pairwise rows when all four members were run
REFERENCE_UNION = ("NCA", "v1", "v3", "v4")


@dataclass
class EvalConfig:
    threshold_strict: float = -7.0
    threshold_loose: float = -6.0
    max_eval_steps: int = 150
    stability_window: int = 10
    stability_epsilon: float = 1e-3
    stability_channels: int = 8
    loss_channels: tuple[int, ...] = tuple(range(8))
    log_floor: float = LOG_FLOOR
    power_watts: float = 285.0
    price_per_kwh: float = 0.37

    def __post_init__(self):
        self.loss_channels = tuple(self.loss_channels)
        if not self.threshold_loose > self.threshold_strict:
            raise ValueError("threshold_loose must exceed threshold_strict")
        if self.stability_window < 1 or self.max_eval_steps < 1:
            raise ValueError("stability_window and max_eval_steps must be positive")

    @property
    def thresholds(self) -> tuple[float, float]:
        return (self.threshold_strict, self.threshold_loose)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_channels"] = list(d["loss_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def log_loss(mse: float, floor: float = LOG_FLOOR) -> float:
    """ln(mse), clamped below at ``floor`` so perfect states stay finite."""
    if mse <= 0.0:
        return floor
    return max(math.log(mse), floor)


@torch.no_grad()
def rollout_to_stable(
    model: CellularAutomaton,
    x: torch.Tensor,
    cfg: EvalConfig,
    generator: Optional[torch.Generator] = None,
    record: bool = False,
    on_step=None,
):
    """Step until the visible channels settle or ``cfg.max_eval_steps`` is hit.

    Settled means the max absolute per-step change on the first
    ``cfg.stability_channels`` channels stays below ``stability_epsilon`` for
    ``stability_window`` consecutive steps. Returns ``(state, steps)`` and,
    with ``record``, the trajectory including the initial state.
    """
    trajectory = [x] if record else None
    calm = 0
    k = cfg.stability_channels
    steps = 0
    for steps in range(1, cfg.max_eval_steps + 1):
        nxt = model.step(x, generator)
        change = float((nxt[:, :k] - x[:, :k]).abs().max())
        x = nxt
        if record:
            trajectory.append(x)
        if on_step is not None:
            on_step(steps, x)
        calm = calm + 1 if change < cfg.stability_epsilon else 0
        if calm >= cfg.stability_window:
            break
    return (x, steps, trajectory) if record else (x, steps)


@dataclass
class TaskResult:
    task_id: str
    variant: str
    log_loss: float
    solved_strict: bool
    solved_loose: bool
    exact_match: bool
    steps_to_stable: int
    wall_time_seconds: float
    pair_log_losses: list[float] = field(default_factory=list)
    max_pixel_error: float = 0.0
    best_step_log_loss: float = LOG_FLOOR
    predictions: list[list[list[int]]] = field(default_factory=list)
    train_final_loss: Optional[float] = None
    seed: Optional[int] = None
    status: str = "ok"
    error: Optional[str] = None
    schema: str = RESULT_SCHEMA

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def solved_at(self, threshold: float) -> bool:
        return self.ok and self.log_loss <= threshold

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, d: Mapping) -> "TaskResult":
        schema = d.get("schema", RESULT_SCHEMA)
        if schema.split("/")[0] != RESULT_SCHEMA.split("/")[0]:
            raise ValueError(f"unsupported result schema {schema!r}")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def failed(cls, task_id: str, variant: str, error: str, wall_time_seconds: float = 0.0, seed: Optional[int] = None) -> "TaskResult":
        # ln(1.0): the loss of a maximally wrong unit-range state; excluded from means
        return cls(task_id, variant, 0.0, False, False, False, 0, wall_time_seconds, seed=seed, status="error", error=error)


def score_task(trained: TrainedModel, task: TaskRecord, cfg: EvalConfig | None = None, generator: Optional[torch.Generator] = None) -> TaskResult:
    """Roll each test input to a stable state and compare with the encoded test output.

    The task's log loss is the worst (largest) test-pair log loss, so a task
    counts as solved only when every test pair meets the threshold.
    """
    cfg = cfg or EvalConfig()
    if not task.test_pairs:
        raise ValueError(f"{task.task_id}: no test pairs")
    model = trained.model
    dtype = next(model.parameters()).dtype
    channels = model.channels
    if generator is None:
        generator = torch.Generator().manual_seed(trained.config.seed + 1)

    pair_losses, predictions, exact, steps_used, max_err, best = [], [], True, 0, 0.0, math.inf
    for pair in task.test_pairs:
        if pair.input.shape != pair.output.shape:
            raise ValueError(f"{task.task_id}: test pair changes size; filter or pad the task first")
        x = to_tensor(encode_grid(pair.input, trained.n_colors, channels), dtype)
        target = to_tensor(encode_grid(pair.output, trained.n_colors, channels), dtype)
        best_pair = [math.inf]

        def track(_step, state, target=target, best_pair=best_pair):
            best_pair[0] = min(best_pair[0], float(pixelwise_mse(state, target, cfg.loss_channels)))

        state, steps = rollout_to_stable(model, x, cfg, generator, on_step=track)
        mse = float(pixelwise_mse(state.double(), target.double(), cfg.loss_channels))
        pair_losses.append(log_loss(mse, cfg.log_floor))
        sq = (state.double() - target.double())[:, list(cfg.loss_channels)] ** 2
        max_err = max(max_err, float(sq.mean(dim=1).max()))
        best = min(best, log_loss(best_pair[0], cfg.log_floor))
        decoded = decode_lattice(to_lattice(state), trained.n_colors)
        predictions.append(decoded.tolist())
        exact = exact and bool(np.array_equal(decoded, pair.output))
        steps_used = max(steps_used, steps)

    worst = max(pair_losses)
    return TaskResult(
        task_id=task.task_id,
        variant=trained.spec.name,
        log_loss=worst,
        solved_strict=worst <= cfg.threshold_strict,
        solved_loose=worst <= cfg.threshold_loose,
        exact_match=exact,
        steps_to_stable=steps_used,
        wall_time_seconds=trained.wall_time_seconds,
        pair_log_losses=pair_losses,
        max_pixel_error=max_err,
        best_step_log_loss=best,
        predictions=predictions,
        train_final_loss=trained.final_loss,
        seed=trained.config.seed,
    )


def group_by_variant(results: Iterable[TaskResult]) -> dict[str, list[TaskResult]]:
    out: dict[str, list[TaskResult]] = {}
    for r in results:
        out.setdefault(r.variant, []).append(r)
    for rs in out.values():
        rs.sort(key=lambda r: r.task_id)
    return out


def solve_rate(results: Sequence[TaskResult], threshold: float) -> float:
    if not results:
        raise ValueError("no results")
    return sum(r.solved_at(threshold) for r in results) / len(results)


def mean_log_loss(results: Sequence[TaskResult]) -> float:
    losses = [r.log_loss for r in results if r.ok]
    return float(np.mean(losses)) if losses else float("nan")


def _check_same_tasks(results_by_variant: Mapping[str, Sequence[TaskResult]], members: Sequence[str]) -> list[str]:
    task_sets = [sorted(r.task_id for r in results_by_variant[m]) for m in members]
    if any(ts != task_sets[0] for ts in task_sets[1:]):
        raise ValueError(f"variants {list(members)} were evaluated on different task sets")
    return task_sets[0]


def union_solve(results_by_variant: Mapping[str, Sequence[TaskResult]], members: Sequence[str], threshold: float = -7.0) -> float:
    """Fraction of tasks solved by at least one of ``members``."""
    tasks = _check_same_tasks(results_by_variant, members)
    if not tasks:
        raise ValueError("no results")
    solved = {r.task_id for m in members for r in results_by_variant[m] if r.solved_at(threshold)}
    return len(solved) / len(tasks)


def union_mean_log_loss(results_by_variant: Mapping[str, Sequence[TaskResult]], members: Sequence[str]) -> float:
    # union rows report the average of the members' mean log losses
    return float(np.mean([mean_log_loss(results_by_variant[m]) for m in members]))


def cost_per_task(mean_wall_seconds: float, power_watts: float, price_per_kwh: float) -> float:
    """Energy cost of one task: hours x kW x price per kWh."""
    return mean_wall_seconds / 3600.0 * power_watts / 1000.0 * price_per_kwh


@dataclass
class VariantRow:
    variant: str
    n_tasks: int
    mean_log_loss: float
    solve_rates: dict[float, float]
    exact_rate: float
    mean_wall_seconds: float
    cost_per_task: float
    n_failed: int = 0


@dataclass
class UnionRow:
    members: tuple[str, ...]
    mean_log_loss: float
    solve_rates: dict[float, float]
    exact_rate: float

    @property
    def name(self) -> str:
        return " ∪ ".join(self.members)


@dataclass
class RunReport:
    thresholds: tuple[float, ...]
    variants: list[VariantRow]
    unions: list[UnionRow]
    log_base: str = "e"


def union_members(variants: Sequence[str]) -> list[tuple[str, ...]]:
    """All pairwise unions, then the all-variant union (three or more variants), then the reference four-way union."""
    combos = [tuple(c) for c in itertools.combinations(variants, 2)]
    if len(variants) >= 3:
        combos.append(tuple(variants))
    if set(REFERENCE_UNION) <= set(variants) and tuple(REFERENCE_UNION) not in combos and len(variants) > 4:
        combos.append(REFERENCE_UNION)
    return combos


def summarize(results: Iterable[TaskResult], cfg: EvalConfig | None = None, thresholds: Sequence[float] | None = None, variant_order: Sequence[str] | None = None) -> RunReport:
    cfg = cfg or EvalConfig()
    thresholds = tuple(thresholds) if thresholds else cfg.thresholds
    by_variant = group_by_variant(results)
    if not by_variant:
        raise ValueError("empty result set")
    names = [v for v in (variant_order or []) if v in by_variant] + sorted(v for v in by_variant if v not in (variant_order or []))

    rows = []
    for name in names:
        rs = by_variant[name]
        wall = float(np.mean([r.wall_time_seconds for r in rs]))
        rows.append(
            VariantRow(
                variant=name,
                n_tasks=len(rs),
                mean_log_loss=mean_log_loss(rs),
                solve_rates={t: solve_rate(rs, t) for t in thresholds},
                exact_rate=sum(r.ok and r.exact_match for r in rs) / len(rs),
                mean_wall_seconds=wall,
                cost_per_task=cost_per_task(wall, cfg.power_watts, cfg.price_per_kwh),
                n_failed=sum(not r.ok for r in rs),
            )
        )

    unions = []
    for members in union_members(names):
        tasks = _check_same_tasks(by_variant, members)
        exact = {r.task_id for m in members for r in by_variant[m] if r.ok and r.exact_match}
        unions.append(
            UnionRow(
                members=members,
                mean_log_loss=union_mean_log_loss(by_variant, members),
                solve_rates={t: union_solve(by_variant, members, t) for t in thresholds},
                exact_rate=len(exact) / len(tasks),
            )
        )
    return RunReport(thresholds, rows, unions)


def build_submission(results_by_variant: Mapping[str, Sequence[TaskResult]], attempts: tuple[str, str]) -> dict:
    """Two-attempt answers per task: attempt 1 from ``attempts[0]``, attempt 2 from ``attempts[1]``."""
    first, second = ({r.task_id: r for r in results_by_variant[v]} for v in attempts)
    out = {}
    for task_id in sorted(set(first) & set(second)):
        a, b = first[task_id], second[task_id]
        n = max(len(a.predictions), len(b.predictions))
        out[task_id] = [
            {
                "attempt_1": a.predictions[i] if i < len(a.predictions) else None,
                "attempt_2": b.predictions[i] if i < len(b.predictions) else None,
            }
            for i in range(n)
        ]
    return out
