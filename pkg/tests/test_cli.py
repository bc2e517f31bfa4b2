import json
import sys
from pathlib import Path

import pytest

from poisonlab.cli import main

BASE_CONFIG = {
    "seed": 11,
    "dataset": {
        "synth": {
            "num_classes": 2,
            "vocab_size": 40,
            "class_skew": 0.8,
            "length_range": [4, 8],
            "n_train": 300,
            "n_test": 80,
        }
    },
    "attack": {
        "type": "lf",
        "target_class": 1,
        "budget": 5,
        "trigger": {"kind": "closed", "token": "cf"},
        "search": {"max_substitutions": 4, "candidates_per_token": 10, "neighbors": {"min_count": 1, "top_m": 10}},
    },
    "train": {"epochs": 3, "learning_rate": 0.5, "batch_size": 16, "num_buckets": 4096},
}


def write_config(tmp_path, **overrides):
    config = json.loads(json.dumps(BASE_CONFIG))
    for key, value in overrides.items():
        config[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def run(cmd, cfg_path, out, extra=()):
    return main([cmd, "--config", str(cfg_path), "--out", str(out), *extra])


def test_poison_manifest_counts(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run("poison", cfg, out) == 0
    manifest = json.loads((out / "poison_manifest.json").read_text())
    assert manifest["counts"]["poison"] == 5
    assert manifest["counts"]["total"] == 305
    assert sum(manifest["trigger_instances"].values()) == 5
    lines = (out / "poisoned_train.jsonl").read_text().splitlines()
    assert len(lines) == 305
    tags = {json.loads(l)["provenance"] for l in lines}
    assert tags == {"clean", "poison_lf"}


def test_poison_rerun_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("poison", cfg, out1) == 0
    assert run("poison", cfg, out2) == 0
    for name in ("poisoned_train.jsonl", "poison_manifest.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_poison_single_class_source_exit_3(tmp_path):
    # every example is the target class: LF has no source pool
    data = tmp_path / "train.jsonl"
    rows = [{"text": f"tok{i} tok{i + 1}", "label": "pos"} for i in range(10)]
    data.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    cfg = write_config(
        tmp_path,
        dataset={"jsonl": {"train": str(data), "test": str(data), "class_names": ["neg", "pos"]}},
    )
    assert run("poison", cfg, tmp_path / "run") == 3


def test_train_eval_pipeline(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run("poison", cfg, out) == 0
    cfg2 = write_config(tmp_path, train_data=str(out / "poisoned_train.jsonl"))
    assert run("train", cfg2, out) == 0
    assert (out / "model.plab").exists()
    assert run("eval", cfg2, out) == 0
    lines = (out / "eval_report.csv").read_text().splitlines()
    assert lines[0].startswith("# ")
    assert lines[1] == "attack,defense,budget,seed,acc,asr,k,p,threshold,wall_ms"
    fields = lines[2].split(",")
    assert fields[0] == "lf" and fields[1] == "none"
    assert 0.0 <= float(fields[4]) <= 1.0


def test_eval_missing_model_exit_2(tmp_path):
    cfg = write_config(tmp_path, model_path=str(tmp_path / "nope.plab"))
    assert run("eval", cfg, tmp_path / "run") == 2


def test_defend_dpa_k_too_large_exit_2(tmp_path):
    cfg = write_config(tmp_path, defense={"name": "dpa", "k": 5000})
    assert run("defend", cfg, tmp_path / "run") == 2


def test_defend_dpa_report(tmp_path):
    cfg = write_config(tmp_path, defense={"name": "dpa", "k": 4})
    out = tmp_path / "run"
    assert run("defend", cfg, out) == 0
    lines = (out / "defense_report.csv").read_text().splitlines()
    fields = lines[2].split(",")
    assert fields[1] == "dpa"
    assert fields[6] == "4"
    assert fields[9] == "0"  # wall_ms pinned for reproducibility


def test_defend_sanitizer_modes(tmp_path):
    out_t = tmp_path / "test_mode"
    out_r = tmp_path / "train_mode"
    cfg_t = write_config(tmp_path, defense={"name": "random", "p": 0.5, "mode": "test", "neighbors": {"min_count": 1}})
    assert run("defend", cfg_t, out_t) == 0
    cfg_r = write_config(tmp_path, defense={"name": "random", "p": 0.5, "mode": "train", "neighbors": {"min_count": 1}})
    assert run("defend", cfg_r, out_r) == 0
    tag_t = (out_t / "defense_report.csv").read_text().splitlines()[2].split(",")[1]
    tag_r = (out_r / "defense_report.csv").read_text().splitlines()[2].split(",")[1]
    assert tag_t == "random-test"
    assert tag_r == "random-train"


def test_defend_external_paraphraser_failure_exit_4(tmp_path):
    cmd = [sys.executable, "-c", "import sys; sys.exit(5)"]
    cfg = write_config(tmp_path, defense={"name": "paraphrase", "mode": "test", "external_cmd": cmd})
    assert run("defend", cfg, tmp_path / "run") == 4


def test_sweep_csv_rows(tmp_path):
    cfg = write_config(tmp_path, sweep={"budgets": [2, 4, 8], "seeds": [0, 1], "attack_types": ["lf"]})
    out = tmp_path / "run"
    assert run("sweep", cfg, out) == 0
    lines = (out / "sweep_lf.csv").read_text().splitlines()
    assert lines[1] == "budget,mean_asr,sd_asr,mean_acc,sd_acc"
    assert len(lines) == 5  # comment + header + 3 budgets


def test_audit_csv(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run("audit", cfg, out) == 0
    lines = (out / "audit.csv").read_text().splitlines()
    assert lines[1] == "n_inspected,poison_recall"
    assert len(lines) == 2 + 305
    last = lines[-1].split(",")
    assert float(last[1]) == 1.0


def test_advgen_outputs(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run("advgen", cfg, out) == 0
    lines = (out / "advgen.jsonl").read_text().splitlines()
    assert lines  # one row per target-class example
    records = [json.loads(l) for l in lines]
    assert all("success" in r and "text" in r for r in records)
    manifest = json.loads((out / "advgen_manifest.json").read_text())
    assert manifest["n_success"] == sum(r["success"] for r in records)


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2, out3 = tmp_path / "s1", tmp_path / "s2", tmp_path / "s3"
    assert run("poison", cfg, out1, extra=["--seed", "99"]) == 0
    assert run("poison", cfg, out2, extra=["--seed", "99"]) == 0
    assert run("poison", cfg, out3, extra=["--seed", "100"]) == 0
    assert (out1 / "poisoned_train.jsonl").read_bytes() == (out2 / "poisoned_train.jsonl").read_bytes()
    assert (out1 / "poisoned_train.jsonl").read_bytes() != (out3 / "poisoned_train.jsonl").read_bytes()


def test_bad_config_exit_2(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    assert main(["poison", "--config", str(path), "--out", str(tmp_path / "x")]) == 2


def test_missing_section_exit_2(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 1, "dataset": {"synth": {"n_train": 50, "n_test": 10, "vocab_size": 30}}}))
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
