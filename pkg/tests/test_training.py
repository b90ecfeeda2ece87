"""Training loop: early stopping, metrics, convergence smoke."""

import numpy as np
import pytest

from taskmoe import data as D
from taskmoe.errors import ConfigError
from taskmoe.model import Model, variant_config
from taskmoe.tensor import Adam
from taskmoe.training import (EarlyStopper, METRIC_COLUMNS, TrainConfig,
                              evaluate, train, train_step, write_metrics_csv)


def run_stopper(scores, patience=2):
    s = EarlyStopper(patience)
    for epoch, score in enumerate(scores, start=1):
        if s.update(score):
            return epoch, s.best_epoch
    return None, s.best_epoch


# -- early stopping rule ------------------------------------------------


def test_early_stop_canonical_sequence():
    # two consecutive non-improving epochs after the peak at epoch 2
    assert run_stopper([10, 12, 12, 11]) == (4, 2)


@pytest.mark.parametrize("scores,expected", [
    ([5, 4, 3], (3, 1)),               # monotone decline stops fastest
    ([1, 2, 3, 4, 5], (None, 5)),      # always improving never stops
    ([10, 10, 10], (3, 1)),            # ties are not improvements
    ([8, 9, 8, 10, 9, 9], (6, 4)),     # recovery resets the counter
    ([3, 2, 4, 4, 3], (5, 3)),
    ([0.0, 0.0, 0.0], (3, 1)),
])
def test_early_stop_sequences(scores, expected):
    assert run_stopper(scores) == expected


def test_early_stop_patience_three():
    assert run_stopper([10, 9, 9, 9], patience=3) == (4, 1)
    assert run_stopper([10, 9, 9, 11, 9], patience=3) == (None, 4)


def test_patience_must_be_positive():
    with pytest.raises(ConfigError):
        EarlyStopper(0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)


# -- metrics file -------------------------------------------------------


def test_metrics_csv_format(tmp_path):
    rows = [{"step": 1, "epoch": 1, "task": "copy", "split": "valid",
             "bleu": 12.3456789, "loss": 0.5, "aux_loss": "",
             "tokens_per_expert_entropy": ""}]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, path)
    text = path.read_text().splitlines()
    assert text[0] == ",".join(METRIC_COLUMNS)
    assert text[1] == "1,1,copy,valid,12.345679,0.500000,,"


# -- training smoke -----------------------------------------------------


def tiny_setup(variant="dense", seed=0):
    spec = D.TaskSpec("copy", "A", "copy", n_train=32, n_valid=8, n_test=8)
    suite = [D.generate_task(spec, seed)]
    vocab = D.Vocab()
    cfg = variant_config(variant, len(vocab), seed=seed, num_experts=2,
                         dropout=0.0)
    model = Model(cfg, ["copy"])
    return model, suite, vocab


def test_train_step_reduces_loss():
    model, suite, vocab = tiny_setup()
    opt = Adam(model.parameters(), lr=1e-3)
    tc = TrainConfig(lr=1e-3, batch_size=16, seed=0)
    batch = next(D.multitask_batches(suite, vocab, 16, seed=0, epoch=1))
    first, _, _ = train_step(model, batch, opt, tc, 0)
    for step in range(1, 40):
        last, _, _ = train_step(model, batch, opt, tc, step)
    assert last < first * 0.5


def test_train_step_raises_on_divergence():
    model, suite, vocab = tiny_setup()
    model.tok_emb.data[:] = np.nan
    opt = Adam(model.parameters())
    batch = next(D.multitask_batches(suite, vocab, 16, seed=0, epoch=1))
    with pytest.raises(FloatingPointError):
        train_step(model, batch, opt, TrainConfig(), 0)


def test_moe_train_step_reports_aux_and_entropy():
    model, suite, vocab = tiny_setup("moe-token")
    opt = Adam(model.parameters())
    batch = next(D.multitask_batches(suite, vocab, 16, seed=0, epoch=1))
    ce, aux, ent = train_step(model, batch, opt, TrainConfig(), 0)
    assert aux > 0.0
    assert ent >= 0.0


def test_evaluate_reports_every_task():
    model, suite, vocab = tiny_setup()
    scores = evaluate(model, suite, vocab, split="valid", max_decode_len=8)
    assert set(scores) == {"copy"}
    assert 0.0 <= scores["copy"]["bleu"] <= 100.0
    assert scores["copy"]["loss"] > 0.0


def test_train_writes_history_and_checkpoint(tmp_path):
    model, suite, vocab = tiny_setup()
    tc = TrainConfig(lr=1e-3, batch_size=16, max_epochs=2, patience=2, seed=0,
                     checkpoint_dir=str(tmp_path))
    result = train(model, suite, vocab, tc)
    assert (tmp_path / "best.ckpt").exists()
    assert result.best_checkpoint == str(tmp_path / "best.ckpt")
    epochs = {r["epoch"] for r in result.history}
    assert epochs == {1, 2}
    splits = {r["split"] for r in result.history}
    assert splits == {"train", "valid"}
    mean_rows = [r for r in result.history if r["task"] == "mean"]
    assert len(mean_rows) == 2
