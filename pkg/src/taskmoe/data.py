"""Synthetic multitask translation benchmark.

Each "language pair" is a deterministic string transformation over a
shared character alphabet, organized into similarity groups (all caesar
variants share structure, etc.). Corpora regenerate bit-identically
from a seed, and all tasks share one character vocabulary.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
LETTERS = ALPHABET[:26]
DIGITS = ALPHABET[26:]

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class Vocab:
    """Character vocabulary shared by every task. Reserved: pad/bos/eos/unk."""

    def __init__(self, alphabet: str = ALPHABET):
        self.alphabet = alphabet
        self.pad, self.bos, self.eos, self.unk = PAD, BOS, EOS, UNK
        self._to_idx = {c: i + 4 for i, c in enumerate(alphabet)}
        self._to_chr = {i + 4: c for i, c in enumerate(alphabet)}

    def __len__(self) -> int:
        return len(self.alphabet) + 4

    def tokenize(self, s: str) -> list[int]:
        return [self.bos] + [self._to_idx.get(c, self.unk) for c in s] + [self.eos]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            if i in (self.bos, self.eos, self.pad):
                continue
            out.append(self._to_chr.get(int(i), "?"))
        return "".join(out)


# -- transformations ---------------------------------------------------


def _caesar(s: str, shift: int) -> str:
    out = []
    for c in s:
        if c in LETTERS:
            out.append(LETTERS[(LETTERS.index(c) + shift) % 26])
        elif c in DIGITS:
            out.append(DIGITS[(DIGITS.index(c) + shift) % 10])
        else:
            out.append(c)
    return "".join(out)


def _swap_pairs(s: str) -> str:
    chars = list(s)
    for i in range(0, len(chars) - 1, 2):
        chars[i], chars[i + 1] = chars[i + 1], chars[i]
    return "".join(chars)


def _duplicate_odd(s: str) -> str:
    # characters at odd 0-based positions appear twice
    return "".join(c * 2 if i % 2 == 1 else c for i, c in enumerate(s))


TRANSFORMS = {
    "copy": lambda s, _: s,
    "reverse": lambda s, _: s[::-1],
    "caesar": lambda s, shift: _caesar(s, shift),
    "swap-pairs": lambda s, _: _swap_pairs(s),
    "sort-chars": lambda s, _: "".join(sorted(s)),
    "duplicate-odd": lambda s, _: _duplicate_odd(s),
}

# transformations whose inverse direction is well defined
INVERTIBLE = {"copy", "reverse", "caesar", "swap-pairs"}


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic 'language pair'."""

    name: str
    group: str
    transform: str
    shift: int = 0                 # caesar only
    direction: str = "forward"     # "forward" | "inverse"
    n_train: int = 400
    n_valid: int = 40
    n_test: int = 40
    tier: str = "high"             # "high" | "low"

    def apply(self, s: str) -> str:
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transformation {self.transform!r}")
        if self.direction == "inverse":
            if self.transform not in INVERTIBLE:
                raise ConfigError(
                    f"transformation {self.transform!r} has no inverse direction")
            if self.transform == "caesar":
                return _caesar(s, -self.shift)
            # copy/reverse/swap-pairs are involutions
            return TRANSFORMS[self.transform](s, self.shift)
        return TRANSFORMS[self.transform](s, self.shift)


@dataclass
class TaskData:
    """Generated corpora for one task, split into disjoint train/valid/test."""

    spec: TaskSpec
    train: list[tuple[str, str]] = field(default_factory=list)
    valid: list[tuple[str, str]] = field(default_factory=list)
    test: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[str, str]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def _task_rng(spec: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(spec.name.encode())])


def generate_task(spec: TaskSpec, seed: int,
                  min_len: int = 4, max_len: int = 24) -> TaskData:
    """Random sources (unique within the task) with transformed targets."""
    rng = _task_rng(spec, seed)
    need = spec.n_train + spec.n_valid + spec.n_test
    sources: list[str] = []
    seen = set()
    while len(sources) < need:
        length = int(rng.integers(min_len, max_len + 1))
        s = "".join(ALPHABET[i] for i in rng.integers(0, len(ALPHABET), length))
        if s in seen:
            continue
        seen.add(s)
        sources.append(s)
    pairs = [(s, spec.apply(s)) for s in sources]
    return TaskData(spec=spec,
                    train=pairs[:spec.n_train],
                    valid=pairs[spec.n_train:spec.n_train + spec.n_valid],
                    test=pairs[spec.n_train + spec.n_valid:])


# -- suites ------------------------------------------------------------


def default_specs(n_train_high: int = 400, n_valid: int = 40,
                  n_test: int = 40) -> list[TaskSpec]:
    """6 tasks, 2 similarity groups, one low-resource task per group."""
    low = max(1, n_train_high // 10)
    base = dict(n_train=n_train_high, n_valid=n_valid, n_test=n_test)
    lo = dict(n_train=low, n_valid=n_valid, n_test=n_test, tier="low")
    return [
        TaskSpec("copy", "A", "copy", **base),
        TaskSpec("reverse", "A", "reverse", **base),
        TaskSpec("swap-pairs", "A", "swap-pairs", **lo),
        TaskSpec("caesar3", "B", "caesar", shift=3, **base),
        TaskSpec("caesar7", "B", "caesar", shift=7, **base),
        TaskSpec("caesar11", "B", "caesar", shift=11, **lo),
    ]


def merge_specs(n_train: int = 300, n_valid: int = 40,
                n_test: int = 40) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Two disjoint 4-task suites (2 groups of 2) for the merge ablation."""
    base = dict(n_train=n_train, n_valid=n_valid, n_test=n_test)
    suite_a = [
        TaskSpec("copy", "A", "copy", **base),
        TaskSpec("reverse", "A", "reverse", **base),
        TaskSpec("caesar3", "B", "caesar", shift=3, **base),
        TaskSpec("caesar7", "B", "caesar", shift=7, **base),
    ]
    suite_b = [
        TaskSpec("swap-pairs", "C", "swap-pairs", **base),
        TaskSpec("sort-chars", "C", "sort-chars", **base),
        TaskSpec("caesar11", "D", "caesar", shift=11, **base),
        TaskSpec("caesar15", "D", "caesar", shift=15, **base),
    ]
    return suite_a, suite_b


def default_suite(seed: int, n_train_high: int = 400, n_valid: int = 40,
                  n_test: int = 40) -> list[TaskData]:
    return [generate_task(s, seed) for s in default_specs(n_train_high, n_valid, n_test)]


# -- batching ----------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray        # [batch, src_len] padded token ids
    tgt_in: np.ndarray     # [batch, tgt_len] bos + target
    tgt_out: np.ndarray    # [batch, tgt_len] target + eos
    task_idx: np.ndarray   # [batch]


def pad_block(rows: list[list[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def encode_pairs(pairs: list[tuple[str, str, int]], vocab: Vocab) -> Batch:
    """pairs: (source, target, task_index) -> one padded batch."""
    src = pad_block([vocab.tokenize(s) for s, _, _ in pairs])
    tgt_ids = [[vocab._to_idx.get(c, vocab.unk) for c in t] for _, t, _ in pairs]
    tgt_in = pad_block([[vocab.bos] + t for t in tgt_ids])
    tgt_out = pad_block([t + [vocab.eos] for t in tgt_ids])
    return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out,
                 task_idx=np.array([i for _, _, i in pairs], dtype=np.int64))


def multitask_batches(suite: list[TaskData], vocab: Vocab, batch_size: int,
                      seed: int, epoch: int, split: str = "train"):
    """One epoch of globally shuffled batches over the concatenated suite.

    No resampling correction: task frequency in batches is proportional
    to corpus size, reproducing the undersampling of low-resource tasks.
    """
    examples: list[tuple[str, str, int]] = []
    for task_index, td in enumerate(suite):
        examples.extend((s, t, task_index) for s, t in td.split(split))
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield encode_pairs(chunk, vocab)


# -- TSV interchange ---------------------------------------------------


def export_tsv(suite: list[TaskData], split: str, path) -> None:
    """source<TAB>target<TAB>task_name, one pair per line, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for td in suite:
            for s, t in td.split(split):
                fh.write(f"{s}\t{t}\t{td.spec.name}\n")


def import_tsv(path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            src, tgt, name = line.split("\t")
            out.append((src, tgt, name))
    return out
