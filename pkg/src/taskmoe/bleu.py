"""Corpus-level BLEU.

Clipped n-gram precisions up to order 4, geometric mean, brevity
penalty exp(1 - r/c) for short hypotheses. Zero-numerator precisions
above order 1 get add-1 smoothing on numerator and denominator; a zero
unigram numerator forces a zero score. Internal consistency against a
hand-counting oracle is the contract, not parity with any external tool.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import ContractError

MAX_ORDER = 4


@dataclass
class BleuScore:
    score: float                       # 0..100
    precisions: tuple[float, ...]      # p1..p4
    brevity_penalty: float
    hyp_length: int
    ref_length: int


def tokenize_for_bleu(s: str) -> list[str]:
    """Whitespace tokens; character-level text becomes one token per symbol."""
    if " " in s:
        return s.split()
    return list(s)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[list[str]], references: list[list[str]]) -> BleuScore:
    """BLEU over aligned (hypothesis, reference) token-sequence lists."""
    if len(hypotheses) != len(references):
        raise ContractError(
            f"corpus size mismatch: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references")
    if not hypotheses:
        raise ContractError("corpus_bleu requires a non-empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hgrams = _ngrams(hyp, n)
            rgrams = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n in range(MAX_ORDER):
        num, den = matches[n], totals[n]
        if den == 0:
            # no n-grams of this order exist anywhere: uninformative
            precisions.append(1.0)
            continue
        if num == 0:
            if n == 0:
                precisions.append(0.0)
                continue
            num, den = num + 1, den + 1
        precisions.append(num / den)

    bp = 1.0 if hyp_len >= ref_len or hyp_len == 0 \
        else math.exp(1.0 - ref_len / hyp_len)

    if precisions[0] == 0.0 or hyp_len == 0:
        score = 0.0
    else:
        log_mean = sum(math.log(p) for p in precisions) / MAX_ORDER
        score = 100.0 * bp * math.exp(log_mean)
    return BleuScore(score=score, precisions=tuple(precisions),
                     brevity_penalty=bp, hyp_length=hyp_len, ref_length=ref_len)
