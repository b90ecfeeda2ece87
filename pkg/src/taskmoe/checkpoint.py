"""Named-tensor checkpoints and trained-model merging.

File layout: magic, format version, a JSON manifest (config + ordered
task registry + adapter count), then raw little-endian float32 tensor
blocks, each preceded by name length, name bytes, rank, and extents as
little-endian 64-bit integers. Bit-exact and dependency-free.
"""

from __future__ import annotations

import datetime
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import Model, ModelConfig

MAGIC = b"TMOECKPT"
FORMAT_VERSION = 1

_ADAPTER_RE = re.compile(r"^(?P<site>.*\.bank)\.adapters\.(?P<idx>\d+)\.(?P<leaf>.+)$")
_TASK_GATE_RE = re.compile(r"^.*\.bank\.gate\.w_t$")


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def task_names(self) -> list[str]:
        return list(self.manifest["tasks"])

    @property
    def num_adapters(self) -> int:
        return int(self.manifest["num_adapters"])

    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["config"])


def checkpoint_from_model(model: Model) -> Checkpoint:
    tensors = {name: p.data.astype(np.float32, copy=True)
               for name, p in model.named_parameters().items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tasks": list(model.task_names),
        "num_adapters": model.num_adapters,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    return Checkpoint(manifest=manifest, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = Model(ckpt.config(), ckpt.task_names, num_adapters=ckpt.num_adapters)
    params = model.named_parameters()
    missing = set(params) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"tensor registry mismatch: missing {sorted(missing)[:5]}, "
            f"unexpected {sorted(extra)[:5]}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return model


# -- file I/O ----------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest_bytes = json.dumps(ckpt.manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(struct.pack("<Q", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8))
        manifest = json.loads(_read_exact(fh, mlen).decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(fh, 8))
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
            tensors[name] = arr.reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor block")
    return Checkpoint(manifest=manifest, tensors=tensors)


def save_model(model: Model, path) -> Checkpoint:
    ckpt = checkpoint_from_model(model)
    save_checkpoint(ckpt, path)
    return ckpt


def load_model(path) -> Model:
    return model_from_checkpoint(load_checkpoint(path))


# -- merging -----------------------------------------------------------


@dataclass
class MergeReport:
    actions: dict[str, str] = field(default_factory=dict)  # tensor -> action
    tasks: list[str] = field(default_factory=list)
    num_adapters: int = 0
    param_delta: int = 0

    def summary(self) -> str:
        counts: dict[str, int] = {}
        for a in self.actions.values():
            counts[a] = counts.get(a, 0) + 1
        lines = ["merge report:",
                 f"  tasks: {', '.join(self.tasks)}",
                 f"  adapters: {self.num_adapters}",
                 f"  parameter delta: {self.param_delta:+d}"]
        for action in ("averaged", "concatenated", "extended", "copied"):
            lines.append(f"  {action}: {counts.get(action, 0)} tensors")
        return "\n".join(lines)

    def to_text(self) -> str:
        body = [self.summary(), "", "per-tensor actions:"]
        body += [f"  {name}: {action}" for name, action in sorted(self.actions.items())]
        return "\n".join(body)


def _check_mergeable(a: Checkpoint, b: Checkpoint) -> None:
    ca, cb = dict(a.manifest["config"]), dict(b.manifest["config"])
    # adapter counts and seeds may differ; everything structural must match
    for d in (ca, cb):
        d.pop("seed", None)
        if d.get("adapters"):
            d["adapters"] = {k: v for k, v in d["adapters"].items()
                             if k != "num_adapters"}
    if ca != cb:
        raise ConfigError("checkpoints have incompatible model configurations")
    overlap = set(a.task_names) & set(b.task_names)
    if overlap:
        raise ConfigError(f"task name sets overlap: {sorted(overlap)}")
    if a.config().adapters is None:
        raise ConfigError("merging requires task-adapter models")


def merge(a: Checkpoint, b: Checkpoint, router_init: str = "copy"
          ) -> tuple[Checkpoint, MergeReport]:
    """Combine two trained task-adapter checkpoints into one model.

    Adapters are concatenated (a's then b's), the task-embedding table
    is stacked in registry order, each task gate grows from L_a (resp.
    L_b) to L_a+L_b output columns, and every remaining tensor is the
    elementwise average. ``router_init="zero"`` re-initializes merged
    task gates to zero instead of copying columns.
    """
    if router_init not in ("copy", "zero"):
        raise ConfigError(f"router_init must be 'copy' or 'zero', got {router_init!r}")
    _check_mergeable(a, b)
    la, lb = a.num_adapters, b.num_adapters
    report = MergeReport(tasks=a.task_names + b.task_names, num_adapters=la + lb)
    merged: dict[str, np.ndarray] = {}

    for name, arr in a.tensors.items():
        m = _ADAPTER_RE.match(name)
        if m:
            merged[name] = arr.copy()
            report.actions[name] = "concatenated"
            continue
        if _TASK_GATE_RE.match(name):
            cols_b = b.tensors[name]
            out = np.concatenate([arr, cols_b], axis=1)
            if router_init == "zero":
                out = np.zeros_like(out)
            merged[name] = out
            report.actions[name] = "extended"
            continue
        if name == "task_embedding.table":
            merged[name] = np.vstack([arr, b.tensors[name]])
            report.actions[name] = "concatenated"
            continue
        other = b.tensors.get(name)
        if other is None or other.shape != arr.shape:
            raise CheckpointError(f"cannot average tensor {name}: missing or shaped differently")
        merged[name] = (arr + other) / 2.0
        report.actions[name] = "averaged"

    for name, arr in b.tensors.items():
        m = _ADAPTER_RE.match(name)
        if m:
            new = f"{m.group('site')}.adapters.{int(m.group('idx')) + la}.{m.group('leaf')}"
            merged[new] = arr.copy()
            report.actions[new] = "copied"

    manifest = dict(a.manifest)
    manifest["config"] = dict(a.manifest["config"])
    manifest["tasks"] = a.task_names + b.task_names
    manifest["num_adapters"] = la + lb
    manifest["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    out = Checkpoint(manifest=manifest, tensors=merged)
    report.param_delta = (sum(t.size for t in merged.values())
                          - sum(t.size for t in a.tensors.values()))
    return out, report


def post_merge_finetune(model: Model, suite, vocab, steps: int,
                        train_config=None, eval_every: int = 50,
                        log=None) -> list[dict]:
    """Fine-tune a merged model on the union suite, tracking recovery.

    Returns rows {step, task, bleu} recorded every ``eval_every`` steps
    (and at step 0 and the final step).
    """
    from .tensor import Adam
    from .training import TrainConfig, evaluate, train_step
    from .data import multitask_batches

    config = train_config or TrainConfig()
    opt = Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas),
               eps=config.adam_eps)
    rows: list[dict] = []

    def record(step: int) -> None:
        scores = evaluate(model, suite, vocab, split="test",
                          batch_size=config.batch_size,
                          max_decode_len=config.max_decode_len)
        for task, m in scores.items():
            rows.append({"step": step, "task": task, "bleu": m["bleu"]})
        if log:
            mean = float(np.mean([m["bleu"] for m in scores.values()]))
            log(f"finetune step {step}: mean test BLEU {mean:.2f}")

    record(0)
    step = 0
    epoch = 0
    while step < steps:
        epoch += 1
        for batch in multitask_batches(suite, vocab, config.batch_size,
                                       config.seed, epoch):
            train_step(model, batch, opt, config, step)
            step += 1
            if step % eval_every == 0 or step == steps:
                record(step)
            if step >= steps:
                break
    return rows
