"""Command-line entry point.

Subcommands: gen, train, eval, merge, inspect-routing. Every command is
deterministic given its config and seed, writes a config snapshot next
to its outputs, and renders figures alongside the delimited files.
"""

from __future__ import annotations

import argparse
import csv
import os
import subprocess
import sys

import numpy as np
import yaml

from . import data as D
from .checkpoint import (load_checkpoint, merge, model_from_checkpoint,
                         post_merge_finetune, save_checkpoint, save_model)
from .errors import (CheckpointError, ConfigError, ContractError,
                     DegenerateBatchError, DimensionError, UnknownTaskError)
from .model import Model, VARIANTS, variant_config
from .training import TrainConfig, evaluate, train, write_metrics_csv

SUITES = ("default", "merge-a", "merge-b")


def _suite_specs(suite: str, n_train_high: int, n_valid: int, n_test: int):
    if suite == "default":
        return D.default_specs(n_train_high, n_valid, n_test)
    a, b = D.merge_specs(n_train_high, n_valid, n_test)
    return a if suite == "merge-a" else b


def _catalog(n_train: int, n_valid: int, n_test: int) -> dict[str, D.TaskSpec]:
    """Every named task this CLI knows, for regenerating data by task name."""
    specs: dict[str, D.TaskSpec] = {}
    for s in D.default_specs(n_train, n_valid, n_test):
        specs[s.name] = s
    for s in D.merge_specs(n_train, n_valid, n_test)[0] + \
            D.merge_specs(n_train, n_valid, n_test)[1]:
        specs.setdefault(s.name, s)
    return specs


def _suite_for_tasks(task_names: list[str], seed: int, n_train: int = 300,
                     n_valid: int = 40, n_test: int = 40) -> list[D.TaskData]:
    catalog = _catalog(n_train, n_valid, n_test)
    suite = []
    for name in task_names:
        if name not in catalog:
            raise UnknownTaskError(f"no generator for task {name!r}")
        suite.append(D.generate_task(catalog[name], seed))
    return suite


def _snapshot(args_dict: dict, out_dir: str) -> None:
    plain = {k: v for k, v in args_dict.items() if not callable(v)}
    with open(os.path.join(out_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(plain, fh, sort_keys=True)


def _load_config_file(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


# -- subcommands -------------------------------------------------------


def cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    specs = _suite_specs(args.suite, args.train_size, args.valid_size, args.test_size)
    suite = [D.generate_task(s, args.seed) for s in specs]
    for split in ("train", "valid", "test"):
        D.export_tsv(suite, split, os.path.join(args.out, f"{split}.tsv"))
    _snapshot(vars(args) | {"command": "gen"}, args.out)
    print(f"wrote {sum(len(td.train) + len(td.valid) + len(td.test) for td in suite)} "
          f"pairs for {len(suite)} tasks to {args.out}")
    return 0


def _run_one_training(args, seed: int, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    specs = _suite_specs(args.suite, args.train_size, args.valid_size, args.test_size)
    suite = [D.generate_task(s, seed) for s in specs]
    vocab = D.Vocab()
    cfg = variant_config(args.variant, len(vocab), preset=args.preset, seed=seed)
    model = Model(cfg, [td.spec.name for td in suite])
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size,
                       max_epochs=args.epochs, patience=args.patience,
                       aux_coeff=args.aux_coeff, seed=seed,
                       checkpoint_dir=out_dir)
    result = train(model, suite, vocab, tcfg, log=print)
    write_metrics_csv(result.history, os.path.join(out_dir, "metrics.csv"))
    from .reports import plot_training_curves
    plot_training_curves(result.history, os.path.join(out_dir, "training_curves.png"))
    _snapshot(vars(args) | {"command": "train", "seed": seed,
                            "model": cfg.to_dict()}, out_dir)
    print(f"[seed {seed}] best valid mean BLEU {result.best_bleu:.2f} "
          f"(epoch {result.best_epoch}); outputs in {out_dir}")
    return {"seed": seed, "best_bleu": result.best_bleu}


def cmd_train(args) -> int:
    if args.jobs > 1:
        # independent seeds as separate processes
        procs = []
        for j in range(args.jobs):
            seed = args.seed + j
            sub_out = os.path.join(args.out, f"seed{seed}")
            cmd = [sys.executable, "-m", "taskmoe.cli", "train",
                   "--variant", args.variant, "--preset", args.preset,
                   "--suite", args.suite, "--seed", str(seed), "--out", sub_out,
                   "--epochs", str(args.epochs), "--batch-size", str(args.batch_size),
                   "--lr", str(args.lr), "--patience", str(args.patience),
                   "--aux-coeff", str(args.aux_coeff),
                   "--train-size", str(args.train_size),
                   "--valid-size", str(args.valid_size),
                   "--test-size", str(args.test_size)]
            procs.append(subprocess.Popen(cmd))
        codes = [p.wait() for p in procs]
        return 0 if all(c == 0 for c in codes) else 1
    _run_one_training(args, args.seed, args.out)
    return 0


def cmd_eval(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    suite = _suite_for_tasks(ckpt.task_names, args.seed,
                             n_valid=args.valid_size, n_test=args.test_size)
    vocab = D.Vocab()
    scores = evaluate(model, suite, vocab, split=args.split)
    rows = [(name, m["bleu"], m["loss"]) for name, m in scores.items()]
    avg = float(np.mean([b for _, b, _ in rows]))

    width = max(len(n) for n, _, _ in rows)
    print(f"{'task':<{width}}  {'BLEU':>7}  {'loss':>7}")
    for name, b, l in rows:
        print(f"{name:<{width}}  {b:7.2f}  {l:7.4f}")
    print(f"{'Average':<{width}}  {avg:7.2f}")

    csv_path = os.path.join(args.out, "bleu.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "bleu", "loss"])
        for name, b, l in rows:
            w.writerow([name, f"{b:.6f}", f"{l:.6f}"])
        w.writerow(["Average", f"{avg:.6f}", ""])
    from .reports import plot_bleu_table
    plot_bleu_table({n: b for n, b, _ in rows},
                    os.path.join(args.out, "bleu.png"),
                    title=f"{args.split} BLEU")
    return 0


def cmd_merge(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    merged, report = merge(a, b, router_init=args.router_init)
    out_path = os.path.join(args.out, "merged.ckpt")
    save_checkpoint(merged, out_path)
    print(report.summary())
    with open(os.path.join(args.out, "merge_report.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")

    if args.finetune_steps > 0:
        model = model_from_checkpoint(merged)
        suite = _suite_for_tasks(merged.task_names, args.seed,
                                 n_train=args.train_size)
        vocab = D.Vocab()
        tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, seed=args.seed)
        rows = post_merge_finetune(model, suite, vocab, args.finetune_steps,
                                   train_config=tcfg, eval_every=args.eval_every,
                                   log=print)
        with open(os.path.join(args.out, "recovery.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "task", "bleu"])
            w.writeheader()
            for r in rows:
                w.writerow({"step": r["step"], "task": r["task"],
                            "bleu": f"{r['bleu']:.6f}"})
        from .reports import plot_recovery_curves
        plot_recovery_curves(rows, os.path.join(args.out, "recovery.png"))
        save_model(model, os.path.join(args.out, "merged_finetuned.ckpt"))
    return 0


def cmd_inspect_routing(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    suite = _suite_for_tasks(ckpt.task_names, args.seed, n_test=args.test_size)
    vocab = D.Vocab()

    site_rows: dict[str, list] = {}
    bank_hist = np.zeros((len(ckpt.task_names), max(model.num_adapters, 1)),
                         dtype=np.int64)
    token_offset = 0
    sent_offset = 0
    for task_index, td in enumerate(suite):
        pairs = [(s, t, task_index) for s, t in td.test]
        batch = D.encode_pairs(pairs, vocab)
        res = model.forward(batch.src, batch.tgt_in, batch.task_idx,
                            collect_routing=True)
        from .adapters import assignment_histogram
        for site, decision, stats, task_tok, pad_keep, sent in res.routing:
            rows = site_rows.setdefault(site, [])
            top = decision.indices[decision.unit_of_token]
            w = decision.selected_weights()[decision.unit_of_token]
            sent_ids = sent if sent is not None else np.repeat(
                np.arange(len(pairs)), len(task_tok) // len(pairs))
            for t in range(len(task_tok)):
                if not pad_keep[t]:
                    continue
                experts = [int(e) for e in top[t] if e >= 0]
                weights = [f"{float(x):.6f}" for x, e in zip(w[t], top[t]) if e >= 0]
                rows.append([token_offset + t, sent_offset + int(sent_ids[t]),
                             task_index, " ".join(map(str, experts)),
                             " ".join(weights)])
            if site.endswith(".bank") and model.num_adapters:
                bank_hist += assignment_histogram(
                    decision, task_tok, len(ckpt.task_names),
                    model.num_adapters, pad_keep)
        token_offset += batch.src.size + batch.tgt_in.size
        sent_offset += len(pairs)

    for site, rows in site_rows.items():
        path = os.path.join(args.out, f"routing_{site.replace('.', '_')}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token_id", "sentence_id", "task_id", "expert_ids", "weights"])
            w.writerows(rows)

    if model.num_adapters:
        with open(os.path.join(args.out, "adapter_histogram.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "adapter_id", "count"])
            for ti in range(bank_hist.shape[0]):
                for ai in range(bank_hist.shape[1]):
                    w.writerow([ti, ai, int(bank_hist[ti, ai])])
        from .reports import plot_adapter_histogram
        plot_adapter_histogram(bank_hist, ckpt.task_names,
                               os.path.join(args.out, "adapter_histogram.png"))
    print(f"routing CSVs for {len(site_rows)} sites written to {args.out}")
    return 0


# -- argument plumbing -------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override its keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/out")


def _add_sizes(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-size", type=int, default=400)
    p.add_argument("--valid-size", type=int, default=40)
    p.add_argument("--test-size", type=int, default=40)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taskmoe",
                                 description="task-based MoE translation experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic corpora as TSV")
    _add_common(g)
    _add_sizes(g)
    g.add_argument("--suite", choices=SUITES, default="default")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one model variant")
    _add_common(t)
    _add_sizes(t)
    t.add_argument("--variant", choices=VARIANTS, default="moe-task-dynamic")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--suite", choices=SUITES, default="default")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--patience", type=int, default=2)
    t.add_argument("--aux-coeff", type=float, default=0.01)
    t.add_argument("--jobs", type=int, default=1,
                   help="run N consecutive seeds as separate processes")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-task BLEU table for a checkpoint")
    _add_common(e)
    e.add_argument("checkpoint")
    e.add_argument("--split", choices=("valid", "test"), default="test")
    e.add_argument("--valid-size", type=int, default=40)
    e.add_argument("--test-size", type=int, default=40)
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("merge", help="merge two trained checkpoints")
    _add_common(m)
    m.add_argument("checkpoint_a")
    m.add_argument("checkpoint_b")
    m.add_argument("--router-init", choices=("copy", "zero"), default="copy")
    m.add_argument("--finetune-steps", type=int, default=0)
    m.add_argument("--eval-every", type=int, default=50)
    m.add_argument("--batch-size", type=int, default=64)
    m.add_argument("--lr", type=float, default=1e-3)
    m.add_argument("--train-size", type=int, default=300)
    m.set_defaults(fn=cmd_merge)

    i = sub.add_parser("inspect-routing", help="dump routing decisions as CSV")
    _add_common(i)
    i.add_argument("checkpoint")
    i.add_argument("--test-size", type=int, default=40)
    i.set_defaults(fn=cmd_inspect_routing)
    return ap


_ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (UnknownTaskError, "unknown-task"),
    (CheckpointError, "checkpoint"),
    (DimensionError, "dimension"),
    (DegenerateBatchError, "degenerate-batch"),
    (ContractError, "contract"),
    (FloatingPointError, "divergence"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        overrides = _load_config_file(args.config)
        cli_tokens = sys.argv[1:] if argv is None else argv
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and f"--{key}" not in cli_tokens:
                setattr(args, attr, value)
    try:
        return args.fn(args)
    except Exception as exc:  # single machine-parseable line per failure
        for etype, cat in _ERROR_CATEGORIES:
            if isinstance(exc, etype):
                print(f"error:{cat}: {exc}", file=sys.stderr)
                return 2
        print(f"error:internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
