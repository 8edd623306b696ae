from __future__ import annotations

import numpy as np
import pytest

from arcnca.dataset import Pair, as_grid, make_task

_ACCEPTANCE: list[tuple[str, str]] = []


def record_criterion(label: str, passed: bool, status: str | None = None) -> None:
    _ACCEPTANCE.append((label, status or ("PASS" if passed else "FAIL")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in _ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {label}")


def line_pair(h: int, w: int, y: int, length: int) -> Pair:
    """A red line of ``length`` at row ``y``; green rows above grow by one per
    row, orange rows below shrink by one per row."""
    a = np.zeros((h, w), dtype=int)
    a[y, :length] = 2
    b = a.copy()
    for r in range(h):
        n = length + (y - r)
        if r < y:
            b[r, : min(n, w)] = 3
        elif r > y and n > 0:
            b[r, :n] = 7
    return Pair(as_grid(a), as_grid(b))


def line_task():
    # every grid is y + length rows tall, so the orange staircase ends on the
    # bottom row; otherwise cyclic shifts of one input need unshifted outputs
    # and no toroidal automaton can fit the pairs
    train = [line_pair(5, 8, 3, 2), line_pair(7, 8, 5, 2), line_pair(7, 8, 4, 3)]
    return make_task("lines", train, [line_pair(6, 8, 4, 2)])


def identity_task(seed: int = 0, size: int = 4):
    rng = np.random.default_rng(seed)

    def pair():
        g = rng.integers(1, 10, size=(size, size))
        return Pair(as_grid(g), as_grid(g))

    return make_task("identity", [pair(), pair()], [pair()])


@pytest.fixture
def tiny_task():
    g = [[1, 0], [0, 2]]
    return make_task("tiny", [Pair(as_grid(g), as_grid(g))], [Pair(as_grid(g), as_grid(g))])
