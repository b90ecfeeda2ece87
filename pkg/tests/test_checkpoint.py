"""Checkpoint format, round-trips, and trained-model merging."""

import numpy as np
import pytest

from taskmoe import data as D
from taskmoe.checkpoint import (Checkpoint, checkpoint_from_model,
                                load_checkpoint, merge, model_from_checkpoint,
                                post_merge_finetune, save_checkpoint)
from taskmoe.errors import CheckpointError, ConfigError
from taskmoe.model import (AdapterSettings, Model, ModelConfig, MoESettings)


def adapter_model(tasks, seed=0, mode="dynamic", vocab_size=12):
    cfg = ModelConfig(vocab_size=vocab_size, n_layers_enc=1, n_layers_dec=1, d_model=8,
                      d_ff=16, n_heads=2, dropout=0.0, max_len=32, seed=seed,
                      moe=MoESettings(num_experts=2, k=1),
                      adapters=AdapterSettings(mode=mode, d_task=4, d_adapter=6))
    return Model(cfg, tasks)


def probe(seed=0, batch=2):
    rng = np.random.default_rng(seed)
    src = rng.integers(3, 12, (batch, 6))
    tgt = rng.integers(3, 12, (batch, 5))
    task = np.zeros(batch, dtype=np.int64)
    return src, tgt, task


# -- round trip ---------------------------------------------------------


def test_save_load_round_trip_bit_identical(tmp_path):
    model = adapter_model(["a", "b", "c"], seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)
    back = load_checkpoint(path)
    assert back.task_names == ["a", "b", "c"]
    assert back.num_adapters == model.num_adapters
    for name, p in model.named_parameters().items():
        assert (back.tensors[name] == p.data).all()
    assert back.config() == model.config


def test_round_trip_preserves_logits_bit_exactly(tmp_path):
    model = adapter_model(["a", "b"], seed=4)
    src, tgt, task = probe()
    before = model.forward(src, tgt, task).logits.data
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)
    after = model_from_checkpoint(load_checkpoint(path)).forward(
        src, tgt, task).logits.data
    assert (before == after).all()


def test_corrupted_files_are_rejected(tmp_path):
    model = adapter_model(["a"])
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(model), path)
    raw = path.read_bytes()

    (tmp_path / "trunc.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    (tmp_path / "trail.ckpt").write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "trail.ckpt")

    bad_version = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
    (tmp_path / "ver.ckpt").write_bytes(bad_version)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")


def test_registry_mismatch_detected():
    model = adapter_model(["a", "b"])
    ckpt = checkpoint_from_model(model)
    del ckpt.tensors["out_proj.w"]
    with pytest.raises(CheckpointError, match="registry"):
        model_from_checkpoint(ckpt)
    ckpt2 = checkpoint_from_model(model)
    ckpt2.tensors["out_proj.w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(CheckpointError, match="shape"):
        model_from_checkpoint(ckpt2)


# -- merging ------------------------------------------------------------


def two_checkpoints(mode="dynamic"):
    a = checkpoint_from_model(adapter_model(["a1", "a2", "a3", "a4"], seed=1,
                                            mode=mode))
    b = checkpoint_from_model(adapter_model(["b1", "b2", "b3", "b4"], seed=2,
                                            mode=mode))
    return a, b


def test_merge_grows_adapters_and_registry():
    a, b = two_checkpoints()
    merged, report = merge(a, b)
    assert merged.task_names == ["a1", "a2", "a3", "a4", "b1", "b2", "b3", "b4"]
    assert merged.num_adapters == 4  # 2 + 2
    assert report.num_adapters == 4
    # a's adapters keep their slots, b's shift up by two
    key = "enc.0.bank.adapters.{}.w_down"
    assert (merged.tensors[key.format(0)] == a.tensors[key.format(0)]).all()
    assert (merged.tensors[key.format(2)] == b.tensors[key.format(0)]).all()
    assert (merged.tensors[key.format(3)] == b.tensors[key.format(1)]).all()
    # embedding table stacks in registry order
    table = merged.tensors["task_embedding.table"]
    assert (table[:4] == a.tensors["task_embedding.table"]).all()
    assert (table[4:] == b.tensors["task_embedding.table"]).all()
    # task gate widens, copying both originals' columns
    gate = merged.tensors["enc.0.bank.gate.w_t"]
    assert gate.shape[1] == 4
    assert (gate[:, :2] == a.tensors["enc.0.bank.gate.w_t"]).all()
    assert (gate[:, 2:] == b.tensors["enc.0.bank.gate.w_t"]).all()
    # everything else is the elementwise average
    w = "enc.0.attn.wq.w"
    assert np.allclose(merged.tensors[w],
                       (a.tensors[w] + b.tensors[w]) / 2.0)


def test_merge_router_init_zero():
    a, b = two_checkpoints()
    merged, _ = merge(a, b, router_init="zero")
    assert (merged.tensors["enc.0.bank.gate.w_t"] == 0).all()
    with pytest.raises(ConfigError):
        merge(a, b, router_init="random")


def test_merged_checkpoint_builds_working_model():
    a, b = two_checkpoints()
    merged, _ = merge(a, b)
    model = model_from_checkpoint(merged)
    assert model.num_adapters == 4
    src, tgt, _ = probe()
    out = model.forward(src, tgt, np.array([0, 7]))  # tasks from both halves
    assert out.logits.shape == (2, 5, 12)


def test_self_merge_changes_no_shared_tensor():
    a = checkpoint_from_model(adapter_model(["a1", "a2"], seed=5))
    twin = Checkpoint(manifest=dict(a.manifest), tensors=dict(a.tensors))
    twin.manifest = dict(a.manifest, tasks=["c1", "c2"])
    merged, report = merge(a, twin)
    for name, action in report.actions.items():
        if action == "averaged":
            assert (merged.tensors[name] == a.tensors[name]).all(), name


def test_merge_rejects_incompatible_checkpoints():
    a, b = two_checkpoints()
    overlap = Checkpoint(manifest=dict(b.manifest, tasks=["a1", "x", "y", "z"]),
                         tensors=b.tensors)
    with pytest.raises(ConfigError, match="overlap"):
        merge(a, overlap)

    other_cfg = checkpoint_from_model(
        Model(ModelConfig(vocab_size=12, n_layers_enc=1, n_layers_dec=1,
                          d_model=16, d_ff=16, n_heads=2, max_len=16,
                          adapters=AdapterSettings(mode="dynamic", d_task=4,
                                                   d_adapter=6)),
              ["b1", "b2", "b3", "b4"]))
    with pytest.raises(ConfigError, match="incompatible"):
        merge(a, other_cfg)

    def bare(tasks, seed):
        return checkpoint_from_model(
            Model(ModelConfig(vocab_size=12, n_layers_enc=1, n_layers_dec=1,
                              d_model=8, d_ff=16, n_heads=2, max_len=16,
                              seed=seed),
                  tasks))

    with pytest.raises(ConfigError, match="adapter"):
        merge(bare(["z1"], 0), bare(["z2"], 1))


def test_merge_seed_difference_is_allowed():
    a, b = two_checkpoints()
    assert a.manifest["config"]["seed"] != b.manifest["config"]["seed"]
    merged, _ = merge(a, b)  # must not raise
    assert merged.num_adapters == 4


# -- post-merge fine-tuning ---------------------------------------------


def test_post_merge_finetune_records_recovery():
    from taskmoe.training import TrainConfig
    model = adapter_model(["copy", "reverse"], seed=6, vocab_size=40)
    suite = [D.generate_task(D.TaskSpec(n, "A", n, n_train=16, n_valid=4,
                                        n_test=4), seed=0)
             for n in ("copy", "reverse")]
    rows = post_merge_finetune(model, suite, D.Vocab(), steps=4,
                               train_config=TrainConfig(batch_size=16,
                                                        max_decode_len=8),
                               eval_every=2)
    steps = sorted({r["step"] for r in rows})
    assert steps == [0, 2, 4]
    assert {r["task"] for r in rows} == {"copy", "reverse"}
