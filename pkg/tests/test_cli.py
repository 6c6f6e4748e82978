import json
import subprocess
import sys

import pytest
import yaml

from fairaudit.audit import file_digest, read_trace
from fairaudit.cli import config_digest, load_config, main
from fairaudit.errors import ConfigError

SMALL = {
    "master_seed": 5,
    "dataset": {"source": "blobs", "audit_size": 6, "blobs": {"n_per_group": 15, "num_groups": 3, "dim": 4}},
    "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.5},
    "audit": {"method": "ALOOA", "rounds": 2},
}


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.setenv("FAIRAUDIT_WORKERS", "1")
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({**SMALL, "output_dir": str(tmp_path / "run")}))
    return path


def _run(*args):
    return main([str(a) for a in args])


def test_flags_override_file(config):
    cfg = load_config(config, ["train.epochs=7"], dataset="blobs", per_class=None, seed=9)
    assert cfg["train"]["epochs"] == 7 and cfg["master_seed"] == 9


def test_digest_ignores_output_and_workers(config):
    a = load_config(config)
    b = load_config(config, ["workers=4"], output_dir="/elsewhere")
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(load_config(config, seed=6))


def test_config_errors(config, tmp_path):
    with pytest.raises(ConfigError):
        load_config(config, ["nonsense.key=1"])
    with pytest.raises(ConfigError):
        load_config(config, ["train.algorithm=DPSGD", "train.noise_multiplier=1", "train.target_epsilon=3"])
    assert _run("train", "--config", tmp_path / "missing.yaml") == 2
    assert _run("audit", "--config", config, "--set", "audit.method=NOPE") == 2


def test_gen_data_and_rerun_digest(config, tmp_path, capsys):
    assert _run("gen-data", "--config", config, "--set", "dataset.blobs.n_per_group=100", "--set", "dataset.blobs.num_groups=10") == 0
    assert "n=1000" in capsys.readouterr().out
    first = file_digest(tmp_path / "run" / "data" / "dataset.bin")
    assert _run("gen-data", "--config", config, "--set", "dataset.blobs.n_per_group=100", "--set", "dataset.blobs.num_groups=10") == 0
    assert file_digest(tmp_path / "run" / "data" / "dataset.bin") == first


def test_per_class_too_large_is_data_error(config, tmp_path):
    csv_path = tmp_path / "d.csv"
    csv_path.write_text("x,y,g\n1,0,a\n2,1,b\n3,0,a\n4,1,b\n")
    args = ["--set", f"dataset.csv.path={csv_path}", "--set", "dataset.csv.label_column=y", "--set", "dataset.csv.group_column=g"]
    assert _run("gen-data", "--config", config, "--dataset", "csv", "--per-class", 5, *args) == 3


def test_unwritable_output_is_config_error(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert _run("gen-data", "--config", config, "--output-dir", blocker / "sub") == 2


def test_train_outputs(config, tmp_path, capsys):
    assert _run("train", "--config", config) == 0
    assert "test accuracy" in capsys.readouterr().out
    out = tmp_path / "run" / "train"
    report = json.loads((out / "train_report.json").read_text())
    assert report["ledger"] is None and not (out / "ledger.json").exists()
    assert (out / "iteration_log.csv").read_text().startswith("# config_digest ")

    assert _run("train", "--config", config, "--set", "train.algorithm=DPSGDS", "--set", "train.target_epsilon=10") == 0
    report = json.loads((out / "train_report.json").read_text())
    assert report["ledger"]["epsilon"] <= 10
    header = (out / "iteration_log.csv").read_text().splitlines()[2].split(",")
    assert [c for c in header if c.startswith("clip_bound_")] == ["clip_bound_0", "clip_bound_1", "clip_bound_2"]


def test_calibration_failure_reports_range(config, capsys):
    code = _run("train", "--config", config, "--set", "train.algorithm=DPSGD", "--set", "train.target_epsilon=1e-6")
    assert code == 2 and "achievable range" in capsys.readouterr().err


def test_audit_compare_report_pipeline(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert _run("audit", "--config", config) == 0
    assert "delta" in capsys.readouterr().out
    trace, meta = read_trace(run / "audit" / "ALOOA" / "trace.csv")
    assert (trace.H[0::2] + trace.H[1::2] == 1).all()
    assert meta["config_digest"] == config_digest(load_config(config))

    assert _run("compare", run / "audit" / "ALOOA" / "trace.csv", run / "audit" / "ALOOA" / "trace.csv", "--out", run / "self") == 0
    same = json.loads((run / "self" / "comparison.json").read_text())
    assert same["mean_abs_diff"] == 0 and same["kruskal_wallis_p"] == 1.0

    assert _run("report", "--config", config) == 3  # no trained model yet
    assert _run("train", "--config", config) == 0
    assert _run("report", "--config", config) == 0
    report = json.loads((run / "report" / "report.json").read_text())
    for key in ("accuracy", "delta", "adv_k", "grc", "grc_spearman", "fairness", "ledger", "cnn_convention"):
        assert key in report
    assert report["accuracy"] == round(report["accuracy"], 2)


def test_report_missing_artifact(config, tmp_path, capsys):
    assert _run("report", "--config", config, "--output-dir", tmp_path / "empty") == 3
    assert "missing artifact" in capsys.readouterr().err


def test_compare_disjoint_ids(config, tmp_path):
    run = tmp_path / "run"
    assert _run("audit", "--config", config) == 0
    assert _run("audit", "--config", config, "--set", "dataset.audit_size=4", "--output-dir", tmp_path / "other") == 0
    a, b = run / "audit" / "ALOOA" / "trace.csv", tmp_path / "other" / "audit" / "ALOOA" / "trace.csv"
    assert _run("compare", a, b, "--out", tmp_path / "cmp") == 4


def test_module_entry_point(config):
    proc = subprocess.run([sys.executable, "-m", "fairaudit", "gen-data", "--config", str(config)], capture_output=True, text=True)
    assert proc.returncode == 0 and "K=3" in proc.stdout
