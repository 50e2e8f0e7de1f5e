import json

import numpy as np
import pytest

from pathfinder.cli import grid_to_image, main
from pathfinder.dataset import load_manifest


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate-data", "--maps", "7", "--tx", "5", "--size", "32", "--seed", "7", "--out", str(root)]) == 0
    return root


def test_generate_counts_and_determinism(corpus, tmp_path):
    assert load_manifest(corpus).n_pairs == 35
    again = tmp_path / "again"
    assert main(["generate-data", "--maps", "7", "--tx", "5", "--size", "32", "--seed", "7", "--out", str(again)]) == 0
    for f in sorted(p.relative_to(corpus) for p in corpus.rglob("*") if p.is_file() and p.name != "config.json"):
        assert (corpus / f).read_bytes() == (again / f).read_bytes(), f
    snap = json.loads((corpus / "config.json").read_text())
    assert snap["seed"] == 7 and snap["synth_config"]["H"] == 32


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate-data", "--maps", "2", "--tx", "1", "--size", "32", "--out", str(blocker / "sub")]) == 1


def test_eval_oracle_gives_zero_metrics(corpus, tmp_path):
    assert main(["eval", "--data", str(corpus), "--predictor", "oracle", "--out", str(tmp_path), "--export-predictions"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["metrics"]) == {"mse", "rmse", "nmse", "mse_r", "rmse_r", "nmse_r"}
    assert all(v == 0 for v in report["metrics"].values())
    assert [c["p"] for c in report["coverage"]] == [40, 30, 20, 10, 5]
    f = report["cdf"]["predicted"]["f"]
    assert f[-1] == 1.0 and all(a <= b for a, b in zip(f, f[1:]))
    exported = sorted((tmp_path / "predictions").rglob("*.pl"))
    assert len(exported) == report["count"] == 5
    assert (tmp_path / "config.json").exists()


def test_env_var_dataset_root(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("PATHFINDER_DATA", str(corpus))
    assert main(["coverage-eval", "--predictor", "oracle", "--out", str(tmp_path), "--levels", "50", "10"]) == 0
    levels = json.loads((tmp_path / "coverage_report.json").read_text())["levels"]
    assert [r["p"] for r in levels] == [50, 10]


def test_s2mt_rows_and_saved_sets(corpus, tmp_path):
    assert main(["s2mt-eval", "--data", str(corpus), "--predictor", "constant:0.5", "--split", "all",
                 "--per-map", "2", "--out", str(tmp_path), "--save-sets"]) == 0
    rows = json.loads((tmp_path / "s2mt_report.json").read_text())["rows"]
    assert [r["n_tx"] for r in rows] == [2, 3, 4, 5]
    # five transmitters per map allow a single 5-way combination
    assert [r["count"] for r in rows] == [14, 14, 14, 7]
    assert (tmp_path / "sets" / "n3" / "sidecar.json").exists()


def test_train_ablation_flags(corpus, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(corpus), "--out", str(out), "--preset", "tiny", "--max-epochs", "1",
                 "--batch-size", "8", "--no-mpl", "--no-tom"]) == 0
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and log[0]["loss_kind"] == "mse"
    snap = json.loads((out / "config.json").read_text())
    assert snap["resolved"]["train"]["use_tom"] is False and snap["resolved"]["network"]["depth"] == 2
    assert (out / "best.safetensors").exists() and (out / "network.cfg").exists()


def test_errors_exit_nonzero(corpus, tmp_path):
    assert main(["eval", "--data", str(corpus), "--checkpoint", str(tmp_path / "none.safetensors"),
                 "--out", str(tmp_path)]) == 1
    assert main(["eval", "--data", str(tmp_path / "nowhere"), "--predictor", "oracle", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["plot", "--report", str(bad), "--out", str(tmp_path / "p")]) == 1
    assert main(["plot", "--out", str(tmp_path / "p")]) == 1


def test_plot_outputs_are_deterministic(corpus, tmp_path):
    assert main(["eval", "--data", str(corpus), "--predictor", "constant:0.25", "--out", str(tmp_path / "ev"),
                 "--export-predictions"]) == 0
    for name in ("a", "b"):
        assert main(["plot", "--report", str(tmp_path / "ev" / "report.json"),
                     "--predictions", str(tmp_path / "ev" / "predictions"), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 6
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_grayscale_mapping():
    assert grid_to_image(np.array([[0.0, 0.5, 1.0, 1.2]])).tolist() == [[0, 128, 255, 255]]
