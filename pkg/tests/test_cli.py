"""CLI subcommands: outputs on disk, determinism, error reporting."""

import os

import numpy as np
import pytest
import yaml

from taskmoe import data as D
from taskmoe.cli import main


def run_train(tmp_path, name, seed=0, extra=()):
    out = str(tmp_path / name)
    code = main(["train", "--variant", "moe-task-static", "--seed", str(seed),
                 "--out", out, "--epochs", "1", "--batch-size", "16",
                 "--train-size", "24", "--valid-size", "4", "--test-size", "4",
                 *extra])
    assert code == 0
    return out


def test_gen_writes_tsvs_and_snapshot(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["gen", "--out", str(out), "--train-size", "20",
                 "--valid-size", "4", "--test-size", "4"]) == 0
    for split in ("train", "valid", "test"):
        assert (out / f"{split}.tsv").exists()
    rows = D.import_tsv(out / "train.tsv")
    assert {name for _, _, name in rows} == \
        {"copy", "reverse", "swap-pairs", "caesar3", "caesar7", "caesar11"}
    snapshot = yaml.safe_load((out / "config.yaml").read_text())
    assert snapshot["command"] == "gen"
    assert snapshot["seed"] == 0
    assert "pairs" in capsys.readouterr().out


def test_train_outputs_and_byte_identical_reruns(tmp_path):
    out1 = run_train(tmp_path, "run1")
    for artifact in ("metrics.csv", "config.yaml", "best.ckpt",
                     "training_curves.png"):
        assert os.path.exists(os.path.join(out1, artifact)), artifact
    out2 = run_train(tmp_path, "run2")
    m1 = open(os.path.join(out1, "metrics.csv"), "rb").read()
    m2 = open(os.path.join(out2, "metrics.csv"), "rb").read()
    assert m1 == m2
    c1 = open(os.path.join(out1, "best.ckpt"), "rb").read()
    c2 = open(os.path.join(out2, "best.ckpt"), "rb").read()
    # manifests embed creation timestamps; tensor payloads must agree
    assert len(c1) == len(c2)
    assert c1[-10_000:] == c2[-10_000:]


def test_eval_writes_table_and_figure(tmp_path, capsys):
    out = run_train(tmp_path, "train")
    eval_out = str(tmp_path / "eval")
    code = main(["eval", os.path.join(out, "best.ckpt"), "--out", eval_out,
                 "--split", "valid", "--valid-size", "4", "--test-size", "4"])
    assert code == 0
    text = capsys.readouterr().out
    assert "Average" in text and "BLEU" in text
    assert os.path.exists(os.path.join(eval_out, "bleu.csv"))
    assert os.path.exists(os.path.join(eval_out, "bleu.png"))
    lines = open(os.path.join(eval_out, "bleu.csv")).read().splitlines()
    assert lines[0] == "task,bleu,loss"
    assert len(lines) == 8  # 6 tasks + Average + header


def test_inspect_routing_writes_sites_and_histogram(tmp_path):
    out = run_train(tmp_path, "train")
    rout = str(tmp_path / "routing")
    code = main(["inspect-routing", os.path.join(out, "best.ckpt"),
                 "--out", rout, "--test-size", "4"])
    assert code == 0
    files = os.listdir(rout)
    # desk preset: 2 enc + 2 dec blocks, each with an MoE and a bank site
    moe_sites = [f for f in files if f.startswith("routing_") and "moe" in f]
    bank_sites = [f for f in files if f.startswith("routing_") and "bank" in f]
    assert len(moe_sites) == 4 and len(bank_sites) == 4
    assert "adapter_histogram.csv" in files
    assert "adapter_histogram.png" in files
    header = open(os.path.join(rout, moe_sites[0])).readline().strip()
    assert header == "token_id,sentence_id,task_id,expert_ids,weights"


def test_merge_command_and_finetune(tmp_path):
    a = run_train(tmp_path, "a", extra=("--suite", "merge-a"))
    b = run_train(tmp_path, "b", extra=("--suite", "merge-b"))
    out = str(tmp_path / "merged")
    code = main(["merge", os.path.join(a, "best.ckpt"),
                 os.path.join(b, "best.ckpt"), "--out", out,
                 "--finetune-steps", "2", "--eval-every", "2",
                 "--train-size", "8"])
    assert code == 0
    for artifact in ("merged.ckpt", "merge_report.txt", "recovery.csv",
                     "recovery.png", "merged_finetuned.ckpt"):
        assert os.path.exists(os.path.join(out, artifact)), artifact
    report = open(os.path.join(out, "merge_report.txt")).read()
    assert "adapters: " in report and "averaged" in report


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("train-size: 8\nvalid-size: 2\ntest-size: 2\nseed: 3\n")
    out = tmp_path / "corpus"
    assert main(["gen", "--config", str(cfg), "--out", str(out),
                 "--seed", "5"]) == 0
    snapshot = yaml.safe_load((out / "config.yaml").read_text())
    assert snapshot["train_size"] == 8   # from the file
    assert snapshot["seed"] == 5         # flag wins


def test_error_lines_and_exit_codes(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing.ckpt"),
                 "--out", str(tmp_path / "x")]) == 2
    assert capsys.readouterr().err.startswith("error:io:")

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage bytes, not a checkpoint")
    assert main(["eval", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert capsys.readouterr().err.startswith("error:checkpoint:")

    with pytest.raises(SystemExit):
        main(["train", "--variant", "not-a-variant"])
