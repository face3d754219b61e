import csv
import json

import pytest

from uniloc.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.yaml").write_text(
        "system: {num_antennas: 16, num_subcarriers: 64}\n"
        "data: {n_train: 30, n_test: 20}\n"
        "dictionary: {angle_grid: 128, delay_grid: 128}\n"
        "train: {epochs: 3, batch_size: 8}\n"
        "hidden: [16, 8]\n"
        "sweep: {grid: [0.5, 1.0]}\n")
    return d


def test_full_cli_flow(run_dir, capsys):
    cfg = str(run_dir / "cfg.yaml")
    assert main(["generate", "--config", cfg, "--out", str(run_dir / "data")]) == 0
    summary = json.loads((run_dir / "data" / "summary.json").read_text())
    assert summary["train"]["n_users"] == 30
    assert main(["label", "--config", cfg, "--data", str(run_dir / "data/train.uloc"),
                 "--out", str(run_dir / "lab/train.uloc"), "--p-i", "0.9"]) == 0
    man = json.loads((run_dir / "lab" / "manifest_label.json").read_text())
    assert man["ground_truth_reads"] == 0 and man["config"]["identify"]["accuracy"] == 0.9
    assert main(["train", "--config", cfg, "--data", str(run_dir / "lab/train.uloc"),
                 "--out", str(run_dir / "model/m.umlp"), "--threads", "1"]) == 0
    assert (run_dir / "model" / "m.loss.png").exists()
    with open(run_dir / "model" / "m.loss.csv") as fh:
        assert len(list(csv.reader(fh))) == 4
    assert main(["evaluate", "--config", cfg, "--test", str(run_dir / "data/test.uloc"),
                 "--model", str(run_dir / "model/m.umlp"), "--out", str(run_dir / "eval")]) == 0
    with open(run_dir / "eval" / "error_cdf.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["error_m", "percentile"] and len(rows) == 21
    assert float(rows[-1][1]) == 100.0
    assert (run_dir / "eval" / "error_cdf.png").exists()
    report = json.loads((run_dir / "eval" / "report.json").read_text())
    assert report["n_users"] == 20
    assert main(["sweep", "--config", cfg, "--train", str(run_dir / "data/train.uloc"),
                 "--test", str(run_dir / "data/test.uloc"), "--out", str(run_dir / "sweep")]) == 0
    with open(run_dir / "sweep" / "sweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 5
    assert (run_dir / "sweep" / "sweep.png").exists()
    assert "crossing p_I" in capsys.readouterr().out


def test_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("nonsense: {}\n")
    assert main(["generate", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "bad config" in capsys.readouterr().err
