"""Loading, validation, filtering and padding of ARC-AGI task files.

A task file is a JSON object with ``train`` and ``test`` lists of
``{"input": grid, "output": grid}`` pairs; the task id is the file stem.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

MAX_SIDE = 30
N_RAW_COLORS = 10
PAD_VALUE = 10


class TaskFormatError(ValueError):
    """Raised when a task file does not match the ARC JSON schema."""


@dataclass(frozen=True)
class Pair:
    input: np.ndarray
    output: np.ndarray

    @property
    def size_changing(self) -> bool:
        return self.input.shape != self.output.shape


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    train_pairs: tuple[Pair, ...]
    test_pairs: tuple[Pair, ...]
    size_changing: bool

    @property
    def pairs(self) -> tuple[Pair, ...]:
        return self.train_pairs + self.test_pairs


@dataclass(frozen=True)
class PaddingPolicy:
    mode: str = "ignore_resizing"  # or "maximal_padding"
    pad_value: int = PAD_VALUE
    pad_to: tuple[int, int] = (MAX_SIDE, MAX_SIDE)

    def __post_init__(self) -> None:
        if self.mode not in ("ignore_resizing", "maximal_padding"):
            raise ValueError(f"unknown padding mode {self.mode!r}")
        if 0 <= self.pad_value < N_RAW_COLORS:
            raise ValueError("pad_value must not collide with a raw ARC color")


def as_grid(cells: Any, *, max_value: int = N_RAW_COLORS - 1, where: str = "grid") -> np.ndarray:
    """Validate a nested list (or array) of color indices and return a read-only int array."""
    if isinstance(cells, np.ndarray):
        arr = cells
    else:
        if not isinstance(cells, list) or not cells or not all(isinstance(row, list) for row in cells):
            raise TaskFormatError(f"{where}: expected a non-empty list of rows")
        widths = {len(row) for row in cells}
        if len(widths) != 1:
            raise TaskFormatError(f"{where}: ragged rows {sorted(widths)}")
        for row in cells:
            for v in row:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise TaskFormatError(f"{where}: non-integer cell {v!r}")
        arr = np.asarray(cells)
    if arr.ndim != 2:
        raise TaskFormatError(f"{where}: expected 2 dimensions, got {arr.ndim}")
    h, w = arr.shape
    if not (1 <= h <= MAX_SIDE and 1 <= w <= MAX_SIDE):
        raise TaskFormatError(f"{where}: dimension {h}x{w} outside 1..{MAX_SIDE}")
    if arr.min() < 0 or arr.max() > max_value:
        raise TaskFormatError(f"{where}: value out of range 0..{max_value}")
    out = np.array(arr, dtype=np.int64)
    out.setflags(write=False)
    return out


def _parse_pairs(raw: Any, key: str, task_id: str) -> tuple[Pair, ...]:
    if not isinstance(raw, list):
        raise TaskFormatError(f"{task_id}: '{key}' must be a list")
    pairs = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "input" not in item or "output" not in item:
            raise TaskFormatError(f"{task_id}: {key}[{i}] needs 'input' and 'output'")
        pairs.append(
            Pair(
                as_grid(item["input"], where=f"{task_id}:{key}[{i}].input"),
                as_grid(item["output"], where=f"{task_id}:{key}[{i}].output"),
            )
        )
    return tuple(pairs)


def make_task(task_id: str, train: Sequence[Pair], test: Sequence[Pair]) -> TaskRecord:
    train, test = tuple(train), tuple(test)
    if not train:
        raise TaskFormatError(f"{task_id}: no train pairs")
    changing = any(p.size_changing for p in train + test)
    return TaskRecord(task_id, train, test, changing)


def parse_task(data: Any, task_id: str) -> TaskRecord:
    if not isinstance(data, dict):
        raise TaskFormatError(f"{task_id}: top level must be an object")
    for key in ("train", "test"):
        if key not in data:
            raise TaskFormatError(f"{task_id}: missing '{key}'")
    return make_task(
        task_id,
        _parse_pairs(data["train"], "train", task_id),
        _parse_pairs(data["test"], "test", task_id),
    )


def load_task(path: str | Path) -> TaskRecord:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TaskFormatError(f"{path.name}: invalid JSON ({exc})") from exc
    return parse_task(data, path.stem)


def load_dataset(directory: str | Path, task_ids: Iterable[str] | None = None) -> list[TaskRecord]:
    """Load every ``*.json`` task in a flat directory, ordered by task id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    paths = sorted(directory.glob("*.json"), key=lambda p: p.stem)
    if task_ids is not None:
        wanted = set(task_ids)
        paths = [p for p in paths if p.stem in wanted]
    return [load_task(p) for p in paths]


def task_to_json(task: TaskRecord) -> dict:
    def dump(pairs):
        return [{"input": p.input.tolist(), "output": p.output.tolist()} for p in pairs]

    return {"train": dump(task.train_pairs), "test": dump(task.test_pairs)}


def filter_same_size(tasks: Iterable[TaskRecord]) -> list[TaskRecord]:
    return [t for t in tasks if not t.size_changing]


def pad_grid(grid: np.ndarray, pad_to: tuple[int, int] = (MAX_SIDE, MAX_SIDE), pad_value: int = PAD_VALUE) -> np.ndarray:
    """Embed ``grid`` at offset (0, 0) of a ``pad_to`` canvas filled with ``pad_value``."""
    h, w = grid.shape
    if h > pad_to[0] or w > pad_to[1]:
        raise TaskFormatError(f"grid {h}x{w} exceeds padding target {pad_to[0]}x{pad_to[1]}")
    out = np.full(pad_to, pad_value, dtype=np.int64)
    out[:h, :w] = grid
    out.setflags(write=False)
    return out


def apply_max_padding(task: TaskRecord, policy: PaddingPolicy = PaddingPolicy("maximal_padding")) -> TaskRecord:
    if policy.mode != "maximal_padding":
        raise ValueError("apply_max_padding needs a maximal_padding policy")

    def pad(pairs):
        return tuple(
            Pair(pad_grid(p.input, policy.pad_to, policy.pad_value), pad_grid(p.output, policy.pad_to, policy.pad_value))
            for p in pairs
        )

    train, test = pad(task.train_pairs), pad(task.test_pairs)
    return replace(task, train_pairs=train, test_pairs=test, size_changing=any(p.size_changing for p in train + test))


def dataset_stats(tasks: Sequence[TaskRecord]) -> dict:
    sizes: dict[str, int] = {}
    for t in tasks:
        for p in t.pairs:
            for g in (p.input, p.output):
                key = f"{g.shape[0]}x{g.shape[1]}"
                sizes[key] = sizes.get(key, 0) + 1
    same = filter_same_size(tasks)
    return {
        "tasks": len(tasks),
        "same_size": len(same),
        "size_changing": len(tasks) - len(same),
        "train_pairs": sum(len(t.train_pairs) for t in tasks),
        "test_pairs": sum(len(t.test_pairs) for t in tasks),
        "max_side": max((max(g.shape) for t in tasks for p in t.pairs for g in (p.input, p.output)), default=0),
        "grid_sizes": dict(sorted(sizes.items(), key=lambda kv: -kv[1])),
    }
