import json
import logging

import numpy as np
import pytest

from arcnca.cli import main
from arcnca.dataset import task_to_json
from arcnca.evaluation import TaskResult

from conftest import identity_task

SMOKE = ["--iterations", "10", "--steps-min", "2", "--steps-max", "3", "--max-eval-steps", "20", "--no-figures"]


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    (d / "ident.json").write_text(json.dumps(task_to_json(identity_task(size=3))))
    grow = {"train": [{"input": [[1]], "output": [[1, 1]]}], "test": [{"input": [[2]], "output": [[2, 2]]}]}
    (d / "grow.json").write_text(json.dumps(grow))
    return d


def solve(dataset, out, *extra):
    return main(["solve", "--dataset", str(dataset), "--out", str(out), *SMOKE, *extra])


def test_solve_smoke(dataset, tmp_path):
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "NCA") == 0
    lines = (out / "results.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["task_id"] == "ident" and rec["status"] == "ok"
    assert (out / "checkpoints" / "NCA" / "ident.pt").is_file()
    assert (out / "logs" / "NCA" / "ident.jsonl").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["global_seed"] == 0 and manifest["variants"] == ["NCA"]
    assert manifest["train"]["iterations"] == 10
    assert (out / "report" / "report.md").is_file()


def test_resume_skips_training(dataset, tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="arcnca")
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "NCA") == 0
    first = (out / "results.jsonl").read_bytes()
    ck = out / "checkpoints" / "NCA" / "ident.pt"
    mtime = ck.stat().st_mtime_ns
    assert solve(dataset, out, "--variants", "NCA") == 0
    assert ck.stat().st_mtime_ns == mtime
    assert (out / "results.jsonl").read_bytes() == first
    assert "0 to run, 1 resumed" in caplog.text


def test_changed_config_needs_force(dataset, tmp_path):
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "NCA") == 0
    assert solve(dataset, out, "--variants", "NCA", "--seed", "4") == 2
    assert solve(dataset, out, "--variants", "NCA", "--seed", "4", "--force") == 0


def test_unknown_variant(dataset, tmp_path, capsys):
    assert solve(dataset, tmp_path / "run", "--variants", "NCA,v7") != 0
    err = capsys.readouterr().err
    assert "v7" in err and "v3" in err


def test_max_padding_keeps_size_changing_task(dataset, tmp_path):
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "v1", "--padding", "max", "--iterations", "2") == 0
    ids = {json.loads(line)["task_id"] for line in (out / "results.jsonl").read_text().splitlines()}
    assert ids == {"ident", "grow"}


def write_results(path, variants, losses):
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "results.jsonl", "w") as f:
        for v in variants:
            for i, loss in enumerate(losses):
                f.write(json.dumps(TaskResult(f"t{i}", v, loss, loss <= -7, loss <= -6, False, 3, 30.0).to_record()) + "\n")


def test_report_two_variants_one_union(tmp_path, capsys):
    write_results(tmp_path / "r", ["NCA", "v3"], [-8.0, -6.5, -2.0])
    assert main(["report", str(tmp_path / "r"), "--no-figures"]) == 0
    md = capsys.readouterr().out
    assert md.count("## Solve threshold") == 2
    assert "ln(MSE) <= -7" in md and "ln(MSE) <= -6" in md
    assert md.count("| NCA ∪ v3 |") == 2
    rows = [l for l in (tmp_path / "r" / "report" / "report.csv").read_text().splitlines()[1:]]
    assert sum(r.startswith("variant,") for r in rows) == 4
    assert sum(r.startswith("union,") for r in rows) == 2


def test_report_single_variant_has_no_unions(tmp_path, capsys):
    write_results(tmp_path / "r", ["NCA"], [-8.0])
    assert main(["report", str(tmp_path / "r"), "--no-figures"]) == 0
    assert "∪" not in capsys.readouterr().out


def test_report_figures(tmp_path):
    write_results(tmp_path / "r", ["NCA", "v1"], [-8.0, -3.0])
    assert main(["report", str(tmp_path / "r")]) == 0
    figs = tmp_path / "r" / "report" / "figures"
    assert (figs / "solve_rates.png").stat().st_size > 0
    assert (figs / "log_loss_hist.png").stat().st_size > 0


def test_report_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) != 0


def test_report_explicit_cost(tmp_path):
    write_results(tmp_path / "r", ["NCA"], [-8.0])
    assert main(["report", str(tmp_path / "r"), "--no-figures", "--power-watts", "200"]) == 0
    csv_rows = (tmp_path / "r" / "report" / "report.csv").read_text().splitlines()
    cost = float(csv_rows[1].split(",")[-1])
    assert cost == pytest.approx(30 / 3600 * 0.2 * 0.37)


def test_frames_export(dataset, tmp_path):
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "NCA") == 0
    frames = tmp_path / "frames"
    args = ["frames", "--checkpoint", str(out / "checkpoints" / "NCA" / "ident.pt"), "--task", str(dataset / "ident.json"), "--steps", "20", "--out", str(frames)]
    assert main(args) == 0
    assert len(list(frames.glob("frame_*.png"))) == 21
    assert not (frames / "rollout.gif").exists()
    assert main(args + ["--gif"]) == 0
    assert (frames / "rollout.gif").is_file()


def test_frames_missing_checkpoint(dataset, tmp_path):
    assert main(["frames", "--checkpoint", str(tmp_path / "nope.pt"), "--task", str(dataset / "ident.json")]) != 0


def test_env_override(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("ARCNCA_ITERATIONS", "3")
    out = tmp_path / "run"
    assert solve(dataset, out, "--variants", "NCA") == 0  # explicit flag wins
    assert json.loads((out / "manifest.json").read_text())["train"]["iterations"] == 10
    monkeypatch.setenv("ARCNCA_DATASET", str(dataset))
    assert main(["solve", "--out", str(tmp_path / "run2"), "--variants", "NCA", "--no-figures", "--steps-min", "1", "--steps-max", "1", "--max-eval-steps", "5"]) == 0
    assert json.loads((tmp_path / "run2" / "manifest.json").read_text())["train"]["iterations"] == 3


def test_dataset_stats(dataset, capsys):
    assert main(["dataset-stats", "--dataset", str(dataset)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["tasks"] == 2 and stats["same_size"] == 1


def test_bad_task_file_exits_nonzero(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    (d / "bad.json").write_text(json.dumps({"train": [{"input": [[12]], "output": [[1]]}], "test": []}))
    assert main(["solve", "--dataset", str(d), "--out", str(tmp_path / "o"), *SMOKE]) != 0


def test_export_frames_writes_gif_frames(tmp_path):
    from arcnca.codec import encode_grid
    from arcnca.reporting import export_frames

    lattices = [encode_grid(np.full((2, 2), v)) for v in (0, 3, 5)]
    paths = export_frames(lattices, tmp_path / "f", scale=2, gif=True)
    assert [p.name for p in paths] == ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
    assert (tmp_path / "f" / "rollout.gif").is_file()
