"""Multitask training loop with validation-BLEU early stopping."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bleu import corpus_bleu, tokenize_for_bleu
from .data import Batch, TaskData, Vocab, encode_pairs, multitask_batches
from .errors import ConfigError
from .model import Model, greedy_decode
from .tensor import Adam, clip_global_norm, cross_entropy

METRIC_COLUMNS = ("step", "epoch", "task", "split", "bleu", "loss",
                  "aux_loss", "tokens_per_expert_entropy")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 2
    aux_coeff: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    max_decode_len: int = 56
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("early-stop patience must be >= 1")


class EarlyStopper:
    """Stop when the score fails to strictly beat the best for `patience` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = -float("inf")
        self.best_epoch = 0
        self.stale = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record one epoch's score; returns True when training should stop."""
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_bleu: float = 0.0
    best_epoch: int = 0
    best_checkpoint: str | None = None
    steps: int = 0


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRIC_COLUMNS})


def train_step(model: Model, batch: Batch, opt: Adam, config: TrainConfig,
               step: int) -> tuple[float, float, float]:
    """One optimizer step; returns (ce_loss, aux_loss, expert entropy)."""
    result = model.forward(batch.src, batch.tgt_in, batch.task_idx,
                           train=True, step=step, collect_routing=True)
    b, s, v = result.logits.shape
    flat = T.reshape(result.logits, (b * s, v))
    ce = cross_entropy(flat, batch.tgt_out.reshape(-1), pad_index=model.config.pad_index)
    loss = ce + T.mul(result.aux_loss, config.aux_coeff)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(
            f"training diverged: non-finite loss at step {step}")
    opt.zero_grad()
    loss.backward()
    clip_global_norm(opt.params, config.grad_clip)
    opt.step()
    moe_entropies = [stats.entropy() for site, _, stats, *_ in result.routing
                     if ".moe" in site]
    ent = float(np.mean(moe_entropies)) if moe_entropies else 0.0
    return ce.item(), result.aux_loss.item(), ent


def evaluate(model: Model, suite: list[TaskData], vocab: Vocab,
             split: str = "valid", batch_size: int = 64,
             max_decode_len: int = 56) -> dict[str, dict]:
    """Greedy-decode every example; per-task corpus BLEU and teacher-forced loss."""
    out = {}
    for task_index, td in enumerate(suite):
        pairs = td.split(split)
        if not pairs:
            continue
        hyps, refs = [], []
        losses = []
        for start in range(0, len(pairs), batch_size):
            chunk = [(s, t, task_index) for s, t in pairs[start:start + batch_size]]
            batch = encode_pairs(chunk, vocab)
            decoded = greedy_decode(model, batch.src, batch.task_idx,
                                    max_decode_len, vocab.bos, vocab.eos)
            hyps.extend(tokenize_for_bleu(vocab.detokenize(ids)) for ids in decoded)
            refs.extend(tokenize_for_bleu(t) for _, t, _ in chunk)
            res = model.forward(batch.src, batch.tgt_in, batch.task_idx, train=False)
            b, s, v = res.logits.shape
            ce = cross_entropy(T.reshape(res.logits, (b * s, v)),
                               batch.tgt_out.reshape(-1),
                               pad_index=model.config.pad_index)
            losses.append(ce.item())
        out[td.spec.name] = {
            "bleu": corpus_bleu(hyps, refs).score,
            "loss": float(np.mean(losses)),
        }
    return out


def train(model: Model, suite: list[TaskData], vocab: Vocab,
          config: TrainConfig, log=None) -> TrainResult:
    """Epoch loop: multitask batches, per-epoch validation BLEU, early stop.

    Saves the best-mean-BLEU checkpoint when config.checkpoint_dir is set.
    """
    from .checkpoint import save_checkpoint, checkpoint_from_model

    opt = Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas),
               eps=config.adam_eps)
    stopper = EarlyStopper(config.patience)
    result = TrainResult()
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        ce_sum = aux_sum = ent_sum = 0.0
        nb = 0
        for batch in multitask_batches(suite, vocab, config.batch_size,
                                       config.seed, epoch):
            ce, aux, ent = train_step(model, batch, opt, config, step)
            ce_sum += ce
            aux_sum += aux
            ent_sum += ent
            nb += 1
            step += 1
        result.history.append({
            "step": step, "epoch": epoch, "task": "all", "split": "train",
            "bleu": "", "loss": ce_sum / max(nb, 1),
            "aux_loss": aux_sum / max(nb, 1),
            "tokens_per_expert_entropy": ent_sum / max(nb, 1),
        })

        scores = evaluate(model, suite, vocab, split="valid",
                          batch_size=config.batch_size,
                          max_decode_len=config.max_decode_len)
        for name, m in scores.items():
            result.history.append({
                "step": step, "epoch": epoch, "task": name, "split": "valid",
                "bleu": m["bleu"], "loss": m["loss"], "aux_loss": "",
                "tokens_per_expert_entropy": "",
            })
        mean_bleu = float(np.mean([m["bleu"] for m in scores.values()]))
        result.history.append({
            "step": step, "epoch": epoch, "task": "mean", "split": "valid",
            "bleu": mean_bleu, "loss": "", "aux_loss": "",
            "tokens_per_expert_entropy": "",
        })
        if log:
            log(f"epoch {epoch}: train loss {ce_sum / max(nb, 1):.4f}, "
                f"valid mean BLEU {mean_bleu:.2f}")

        improved = mean_bleu > stopper.best
        stop = stopper.update(mean_bleu)
        if improved:
            result.best_bleu = mean_bleu
            result.best_epoch = epoch
            if config.checkpoint_dir is not None:
                os.makedirs(config.checkpoint_dir, exist_ok=True)
                path = os.path.join(config.checkpoint_dir, "best.ckpt")
                save_checkpoint(checkpoint_from_model(model), path)
                result.best_checkpoint = path
        if stop:
            break
    result.steps = step
    return result
