import json
import subprocess
import sys

import pytest

from peml.cli import main
from peml.diagnostics import switching_latency_model

TINY = """
[run]
seed = 0
output_dir = "out"

[data]
path = "out/suite.jsonl"
families = ["pattern", "order"]
n_train = 40
n_val = 20
n_test = 10
vocab_size = 16
seq_len = 6

[base]
pretrain_steps = 20

[model]
d_model = 8
n_heads = 2
n_blocks = 1
d_ff = 12
lora_rank = 2
lora_alpha = 4.0

[train]
max_epochs = 2
steps_per_epoch = 3
gamma = 0.25
prefix_length = 2

[search]
n_layers = 1
k = 2

[hpo]
n_trials = 3
budget = 1
prefix_length = [1, 4]
"""


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PEML_SEED", raising=False)
    monkeypatch.delenv("PEML_OUTPUT_DIR", raising=False)
    (tmp_path / "tiny.toml").write_text(TINY)
    assert main(["gen-data", "-c", "tiny.toml"]) == 0
    return tmp_path


def run(*argv):
    return main([*argv, "-c", "tiny.toml"])


def test_gen_data_refuses_overwrite(tiny):
    assert run("gen-data") == 2
    assert run("gen-data", "--force") == 0


def test_bad_config_and_usage_exit_1(tiny, capsys):
    assert run("train", "--set", "model.d_model='x'") == 1
    assert "model.d_model: expected an integer" in capsys.readouterr().err
    assert run("train", "--set", "train.colour=1") == 1
    assert main(["frobnicate"]) == 1
    assert run("diagnose", "nonsense") == 1
    assert "invalid choice" in capsys.readouterr().err
    assert main(["train", "-c", "missing.toml"]) == 1


def test_missing_dataset_exit_1(tiny):
    assert run("train", "--set", 'data.path="nowhere.jsonl"') == 1


def test_dataset_shape_mismatch_exit_1(tiny, capsys):
    assert run("train", "--set", "data.vocab_size=32") == 1
    assert "does not match" in capsys.readouterr().err


def test_numeric_failure_exit_3(tiny):
    assert run("train", "--set", "train.lr=0.9", "--set", "train.optimizer='sgd'",
               "--set", "model.lora_init_std=1e150") == 3


def test_train_outputs_and_byte_identical_rerun(tiny):
    assert run("train") == 0
    out = tiny / "out"
    names = ["config.toml", "checkpoint.json", "architecture.json", "history.csv", "base.json"]
    first = {n: (out / n).read_bytes() for n in names}
    assert run("train") == 0
    assert {n: (out / n).read_bytes() for n in names} == first
    assert len((out / "history.csv").read_text().splitlines()) == 1 + 6


def test_seed_flag_changes_run(tiny):
    assert run("train") == 0
    a = (tiny / "out" / "history.csv").read_bytes()
    assert run("train", "--seed", "5") == 0
    assert (tiny / "out" / "history.csv").read_bytes() != a


def test_modes_and_search(tiny):
    assert run("train", "--mode", "lora-only", "--out", "lo") == 0
    assert not (tiny / "lo" / "architecture.json").exists()
    assert run("search", "--out", "se") == 0
    ck = json.loads((tiny / "se" / "checkpoint.json").read_text())
    assert ck["train_config"]["lr_scale"]["lora"] == 0.0


def test_eval_and_export(tiny, capsys):
    assert run("train") == 0
    capsys.readouterr()
    assert run("eval", "--split", "val") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].startswith("macro\t")
    macro = json.loads((tiny / "out" / "eval_val.json").read_text())["macro"]
    ck = json.loads((tiny / "out" / "checkpoint.json").read_text())
    assert abs(macro - ck["metrics"]["final_val"]) < 1e-12
    assert run("export-arch", "--output", "arch.json") == 0
    assert run("export-arch", "--output", "arch.json") == 2
    assert json.loads((tiny / "arch.json").read_text()) == \
        json.loads((tiny / "out" / "architecture.json").read_text())


def test_eval_missing_checkpoint_exit_1(tiny):
    assert run("eval", "--checkpoint", "none.json") == 1


def test_hpo_resume_is_equivalent(tiny):
    assert run("hpo", "--out", "full") == 0
    assert run("hpo", "--out", "part", "--set", "hpo.n_trials=2") == 0
    assert run("hpo", "--out", "part") == 0
    for name in ("trials.jsonl", "leaderboard.csv", "best_checkpoint.json"):
        assert (tiny / "full" / name).read_bytes() == (tiny / "part" / name).read_bytes()


def test_latency_cli_matches_function(tiny, capsys):
    assert main(["diagnose", "latency", "--tf", "52", "--ts", "4.3", "--n", "100"]) == 0
    out = capsys.readouterr().out.splitlines()
    rep = switching_latency_model(52, 4.3, 100)
    assert out == [f"multi-adapter: {rep.multi_adapter_ms:g} ms", f"unified: {rep.unified_ms:g} ms",
                   f"reduction: {rep.reduction_pct:.1f}%"]
    assert main(["diagnose", "latency", "--tf", "52"]) == 1


def test_diagnose_reports(tiny):
    assert run("train") == 0
    assert run("diagnose", "overhead") == 0
    assert run("diagnose", "relaxation", "--seeds", "5") == 0
    assert run("diagnose", "sensitivity", "--layers", "1,2", "--seeds", "1") == 0
    assert run("diagnose", "convergence", "--steps", "20") == 0
    d = tiny / "out" / "diagnostics"
    for name in ("overhead.json", "relaxation.csv", "relaxation.json", "sensitivity.csv",
                 "convergence.json", "convergence_history.csv"):
        assert (d / name).exists(), name
    assert len((d / "sensitivity.csv").read_text().splitlines()) == 3
    assert json.loads((d / "convergence.json").read_text())["steps"] == 20


def test_console_entry_point(tiny):
    proc = subprocess.run([sys.executable, "-m", "peml.cli", "diagnose", "latency", "--tf", "11",
                           "--ts", "2.1", "--n", "100"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "multi-adapter: 1310 ms"
    proc = subprocess.run([sys.executable, "-m", "peml.cli"], capture_output=True, text=True)
    assert proc.returncode == 1


def test_hpo_warm_start_resume_is_equivalent(tiny):
    warm = ["--set", "hpo.warm_start=true"]
    assert run("hpo", "--out", "full", *warm) == 0
    assert run("hpo", "--out", "part", "--set", "hpo.n_trials=2", *warm) == 0
    assert run("hpo", "--out", "part", *warm) == 0
    for name in ("trials.jsonl", "leaderboard.csv", "best_checkpoint.json"):
        assert (tiny / "full" / name).read_bytes() == (tiny / "part" / name).read_bytes()
