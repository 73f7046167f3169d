import csv
import json
import os

import pytest

from ridg.cli import main


FAST = ["--set", "samples_per_domain=60", "--set", "steps=40",
        "--set", "eval_interval=20", "--set", "hidden=[8]",
        "--set", "feature_dim=4", "--set", "batch_size=16"]


def run(argv):
    return main(argv)


def test_generate_is_byte_identical_per_seed(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["generate", "--preset", "two_blobs", "--seed", "7",
                "--set", "samples_per_domain=40", "--out", str(a)]) == 0
    assert run(["generate", "--preset", "two_blobs", "--seed", "7",
                "--set", "samples_per_domain=40", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    assert run(["generate", "--preset", "two_blobs", "--seed", "8",
                "--set", "samples_per_domain=40", "--out", str(c)]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_generate_flips_holdout_domain_strength(tmp_path):
    out = tmp_path / "d.csv"
    assert run(["generate", "--preset", "two_blobs", "--seed", "1",
                "--holdout-domain", "0", "--set", "samples_per_domain=200",
                "--out", str(out)]) == 0
    from ridg.data import load_csv
    ds = load_csv(out)
    spur = ds.features[:, 2:4].argmax(axis=1)
    agree0 = (spur[ds.domains == 0] == ds.labels[ds.domains == 0]).mean()
    agree1 = (spur[ds.domains == 1] == ds.labels[ds.domains == 1]).mean()
    assert agree0 < 0.3  # flipped target domain
    assert agree1 > 0.7


def test_train_then_report_names_erm_row(tmp_path):
    run_dir = tmp_path / "run"
    assert run(["train", "--variant", "none", "--seed", "3", "--out", str(run_dir),
                *FAST]) == 0
    assert (run_dir / "manifest.json").exists()
    assert (run_dir / "traces.csv").exists()
    assert (run_dir / "checkpoint.json").exists()

    report_dir = tmp_path / "tables"
    assert run(["report", "--runs", str(run_dir), "--out", str(report_dir)]) == 0
    csv_files = [f for f in os.listdir(report_dir) if f.endswith(".csv")]
    with open(report_dir / csv_files[0], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][0] == "ERM"


def test_train_manifest_echoes_effective_config_and_seeds(tmp_path):
    run_dir = tmp_path / "run"
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"steps": 30, "alpha": 0.02}))
    assert run(["train", "--config", str(cfg_file), "--variant", "rationale",
                "--alpha", "0.05", "--seed", "4", "--out", str(run_dir),
                "--set", "samples_per_domain=60", "--set", "hidden=[8]",
                "--set", "feature_dim=4", "--set", "eval_interval=15"]) == 0
    doc = json.loads((run_dir / "manifest.json").read_text())
    assert doc["config"]["steps"] == 30          # from the file
    assert doc["config"]["alpha"] == 0.05        # flag wins over file
    assert doc["config"]["samples_per_domain"] == 60
    layers = [s["layer"] for s in doc["config_sources"]]
    assert layers == ["defaults", f"file:{cfg_file}", "flags", "set"]
    assert doc["seeds"]["master"] == 4
    assert doc["method"] == "Ours"
    assert "selected_target_accuracy" in doc["metrics"]
    assert doc["hash"]


def test_unknown_config_key_rejected(tmp_path):
    code = run(["train", "--out", str(tmp_path / "x"), "--set", "bogus_key=1", *FAST])
    assert code == 1


def test_bad_flag_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run(["train", "--no-such-flag"])
    assert err.value.code == 2


def test_runtime_failure_exits_1_with_single_error_line(tmp_path, capsys):
    code = run(["train", "--data", str(tmp_path / "missing.csv"),
                "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:")
    assert "\n" not in err


def test_sweep_writes_manifests_and_trials(tmp_path):
    out = tmp_path / "sweep"
    assert run(["sweep", "--variant", "rationale", "--trials", "2",
                "--holdout-domain", "1", "--seed", "5", "--out", str(out),
                "--set", "domain_count=2", *FAST]) == 0
    manifests = os.listdir(out / "manifests")
    assert len([f for f in manifests if f.endswith(".json")]) == 2
    with open(out / "trials.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "dataset", "domain", "accuracy"]
    assert len(rows) == 3


def test_ablate_emits_eight_method_rows(tmp_path):
    out = tmp_path / "ablate"
    assert run(["ablate", "--preset", "two_blobs", "--trials", "1",
                "--holdout-domain", "1", "--seed", "2", "--out", str(out),
                "--set", "domain_count=2", *FAST]) == 0
    with open(out / "ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "method"
    methods = [r[0] for r in rows[1:]]
    assert methods == ["ERM", "W/ fea.", "W/ log.", "W/ fea.&log.", "W/ m=0",
                       "W/ m=1", "W/ Rbar=0", "Ours"]
    assert all(len(r) == len(rows[0]) for r in rows[1:])
    # every trial left a manifest behind
    manifests = [f for f in os.listdir(out / "manifests") if f.endswith(".json")]
    assert len(manifests) == 8


def test_export_rationales_roundtrip(tmp_path):
    data_csv = tmp_path / "d.csv"
    assert run(["generate", "--preset", "two_blobs", "--seed", "1",
                "--set", "samples_per_domain=40", "--out", str(data_csv)]) == 0
    run_dir = tmp_path / "run"
    assert run(["train", "--variant", "rationale", "--seed", "1",
                "--data", str(data_csv), "--out", str(run_dir), *FAST]) == 0
    out_csv = tmp_path / "r.csv"
    assert run(["export-rationales", "--checkpoint", str(run_dir / "checkpoint.json"),
                "--data", str(data_csv), "--out", str(out_csv)]) == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["r0", "r1"]
    assert rows[0][-2:] == ["label", "domain"]
    assert len(rows) == 1 + 160  # 40 per domain x 4 domains
    assert len(rows[0]) == 4 * 2 + 2  # feature_dim 4 x 2 classes + label + domain


def test_precision_env_var_is_validated(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RIDG_PRECISION", "f16")
    code = run(["generate", "--preset", "two_blobs", "--seed", "1",
                "--set", "samples_per_domain=10", "--out", str(tmp_path / "x.csv")])
    assert code == 1
    assert "RIDG_PRECISION" in capsys.readouterr().err


def test_normalization_alias_accepted(tmp_path):
    run_dir = tmp_path / "run"
    assert run(["train", "--variant", "rationale", "--normalization", "eq3",
                "--seed", "1", "--out", str(run_dir), *FAST]) == 0
    doc = json.loads((run_dir / "manifest.json").read_text())
    assert doc["config"]["normalization"] == "sample_sum_over_batch"
