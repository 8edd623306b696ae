import numpy as np

from arcnca.dataset import make_task

from conftest import identity_task, line_pair, line_task


def torus_conflicts(task):
    """Same-shape pairs whose inputs are cyclic shifts but whose outputs are not
    shifted the same way; a toroidal automaton cannot map both correctly."""
    conflicts = []
    pairs = task.pairs
    for i, a in enumerate(pairs):
        for b in pairs[i + 1 :]:
            if a.input.shape != b.input.shape:
                continue
            h, w = a.input.shape
            for dy in range(h):
                for dx in range(w):
                    if np.array_equal(np.roll(a.input, (dy, dx), (0, 1)), b.input):
                        if not np.array_equal(np.roll(a.output, (dy, dx), (0, 1)), b.output):
                            conflicts.append((dy, dx))
    return conflicts


def test_line_pair_shape():
    p = line_pair(5, 8, 3, 2)
    assert p.output.tolist() == [
        [3, 3, 3, 3, 3, 0, 0, 0],
        [3, 3, 3, 3, 0, 0, 0, 0],
        [3, 3, 3, 0, 0, 0, 0, 0],
        [2, 2, 0, 0, 0, 0, 0, 0],
        [7, 0, 0, 0, 0, 0, 0, 0],
    ]


def test_line_task_is_consistent_on_a_torus():
    assert torus_conflicts(line_task()) == []
    assert torus_conflicts(identity_task()) == []


def test_fixed_height_lines_conflict_on_a_torus():
    # same grid, same length, different row: a shift of the input, not of the output
    task = make_task("fixed", [line_pair(7, 7, 3, 2)], [line_pair(7, 7, 4, 2)])
    assert torus_conflicts(task) == [(1, 0)]
