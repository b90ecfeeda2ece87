"""Sparse mixture-of-experts feed-forward layer.

A gate scores N expert FFNs per routing unit (token or sentence), the
top-k experts are kept with renormalized weights, and only the selected
experts run on their assigned tokens. A load-balancing auxiliary loss
discourages expert collapse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class RoutingDecision:
    """Discrete routing outcome for one forward pass.

    indices: [units, k] selected expert ids per routing unit, ranked by
        gate probability (ties to the lowest index); -1 marks a slot
        emptied by capacity overflow.
    dist: [units, N] full gate distribution (detached values).
    unit_of_token: [tokens] map from token position to routing unit.
    """

    indices: np.ndarray
    dist: np.ndarray
    unit_of_token: np.ndarray

    @property
    def num_units(self) -> int:
        return self.dist.shape[0]

    @property
    def num_choices(self) -> int:
        return self.dist.shape[1]

    def selection_mask(self) -> np.ndarray:
        """[units, N] 0/1 mask of surviving selections."""
        mask = np.zeros_like(self.dist)
        u = np.repeat(np.arange(self.indices.shape[0]), self.indices.shape[1])
        e = self.indices.reshape(-1)
        ok = e >= 0
        mask[u[ok], e[ok]] = 1.0
        return mask

    def selected_weights(self) -> np.ndarray:
        """[units, k] renormalized weights aligned with ``indices`` (detached)."""
        mask = self.selection_mask()
        kept = self.dist * mask
        denom = kept.sum(axis=1, keepdims=True)
        denom[denom == 0] = 1.0
        w = kept / denom
        out = np.zeros_like(self.indices, dtype=self.dist.dtype)
        for j in range(self.indices.shape[1]):
            e = self.indices[:, j]
            ok = e >= 0
            out[ok, j] = w[np.arange(len(e))[ok], e[ok]]
        return out


@dataclass
class DispatchStats:
    """Per-expert utilization for one forward pass (token granularity)."""

    token_fraction: np.ndarray      # hard top-1 fraction f_e
    mean_prob: np.ndarray           # soft mean gate probability P_e
    token_counts: np.ndarray        # tokens whose surviving selection set includes e
    dropped_tokens: int = 0         # tokens every selection of which overflowed
    overflow_events: int = 0        # (token, expert) assignments refused by capacity

    def entropy(self) -> float:
        """Entropy (nats) of the hard token-assignment distribution."""
        f = self.token_fraction[self.token_fraction > 0]
        return float(-(f * np.log(f)).sum())


class Expert:
    """One FFN replica: two linear maps with a relu between."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        self.w_in = T.Tensor(T.xavier(rng, d_model, d_ff), requires_grad=True)
        self.b_in = T.Tensor(np.zeros(d_ff), requires_grad=True)
        self.w_out = T.Tensor(T.xavier(rng, d_ff, d_model), requires_grad=True)
        self.b_out = T.Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(T.relu(T.matmul(x, self.w_in) + self.b_in), self.w_out) + self.b_out

    def parameters(self):
        return [self.w_in, self.b_in, self.w_out, self.b_out]

    def named_parameters(self, prefix: str):
        return {f"{prefix}.w_in": self.w_in, f"{prefix}.b_in": self.b_in,
                f"{prefix}.w_out": self.w_out, f"{prefix}.b_out": self.b_out}


class MoELayer:
    """N experts plus a gate, replacing one dense FFN."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int,
                 num_experts: int = 8, k: int = 1, granularity: str = "token",
                 capacity_factor: float | None = None, gate_input_dim: int | None = None):
        if k > num_experts:
            raise ConfigError(f"top-k k={k} exceeds expert count N={num_experts}")
        if granularity not in ("token", "sentence"):
            raise ConfigError(f"unknown granularity {granularity!r}")
        self.num_experts = num_experts
        self.k = k
        self.granularity = granularity
        self.capacity_factor = capacity_factor
        gate_in = gate_input_dim if gate_input_dim is not None else d_model
        self.w_g = T.Tensor(T.xavier(rng, gate_in, num_experts), requires_grad=True)
        self.experts = [Expert(rng, d_model, d_ff) for _ in range(num_experts)]

    def parameters(self):
        out = [self.w_g]
        for e in self.experts:
            out.extend(e.parameters())
        return out

    def named_parameters(self, prefix: str):
        out = {f"{prefix}.gate.w_g": self.w_g}
        for i, e in enumerate(self.experts):
            out.update(e.named_parameters(f"{prefix}.experts.{i}"))
        return out


def gate_forward(x: Tensor, w_g: Tensor) -> Tensor:
    """Full gate distribution: softmax(x @ w_g), one row per routing unit."""
    return T.softmax(T.matmul(x, w_g))


def top_k_select(dist: np.ndarray, k: int, unit_of_token: np.ndarray | None = None) -> RoutingDecision:
    """Keep the k most probable choices per unit; ties go to the lowest index."""
    n = dist.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k k={k} must be in [1, {n}]")
    order = np.argsort(-dist, axis=1, kind="stable")
    indices = order[:, :k].astype(np.int64)
    if unit_of_token is None:
        unit_of_token = np.arange(dist.shape[0], dtype=np.int64)
    return RoutingDecision(indices=indices, dist=np.array(dist, copy=True),
                           unit_of_token=np.asarray(unit_of_token, dtype=np.int64))


def apply_capacity(decision: RoutingDecision, capacity_factor: float) -> tuple[RoutingDecision, int, int]:
    """Enforce per-expert token budgets, in token arrival order.

    Each expert accepts at most ceil(capacity_factor * tokens / N)
    tokens. A token whose preferred expert is full falls back to its
    next-best expert with free capacity; a token refused everywhere
    keeps an empty selection (residual pass-through).

    Returns (new decision, overflow_events, dropped_tokens).
    """
    if capacity_factor <= 0:
        raise ConfigError("capacity_factor must be positive")
    n = decision.num_choices
    k = decision.indices.shape[1]
    tokens = decision.unit_of_token
    cap = math.ceil(capacity_factor * len(tokens) / n)
    ranking = np.argsort(-decision.dist, axis=1, kind="stable")

    load = np.zeros(n, dtype=np.int64)
    # Capacity individualizes decisions, so the result is token-granular.
    new_indices = np.full((len(tokens), k), -1, dtype=np.int64)
    overflow = 0
    dropped = 0
    for t, u in enumerate(tokens):
        got = 0
        for e in ranking[u]:
            if got == k:
                break
            if load[e] < cap:
                new_indices[t, got] = e
                load[e] += 1
                got += 1
            elif e in decision.indices[u]:
                overflow += 1
        if got == 0:
            dropped += 1
    new_dist = decision.dist[tokens]
    new_decision = RoutingDecision(indices=new_indices, dist=new_dist,
                                   unit_of_token=np.arange(len(tokens), dtype=np.int64))
    return new_decision, overflow, dropped


def combine_weights(dist: Tensor, decision: RoutingDecision) -> Tensor:
    """Differentiable [units, N] combination weights.

    Selected gate probabilities renormalized to sum to 1 per unit;
    non-selected entries are exactly zero. Units whose every selection
    was dropped get an all-zero row.
    """
    mask = decision.selection_mask()
    kept = T.mul(dist, mask)
    denom = T.tsum(kept, axis=1, keepdims=True)
    # Lift empty rows' denominator to 1; their numerators are zero anyway.
    empty = (denom.data == 0).astype(denom.data.dtype)
    return T.mul(kept, T.reciprocal(denom + empty))


def sparse_dispatch(x: Tensor, weights: Tensor, decision: RoutingDecision, fns) -> Tensor:
    """Run fns[e] on the tokens assigned to choice e and recombine.

    x: [tokens, d]; weights: [units, N] differentiable combination
    weights; fns: per-choice callables Tensor[n, d] -> Tensor[n, d].
    Non-selected choices never see the tokens, so their parameters
    receive no gradient.
    """
    num_tokens = x.shape[0]
    token_mask = decision.selection_mask()[decision.unit_of_token]  # [tokens, N]
    parts = []
    for e in range(decision.num_choices):
        idx = np.nonzero(token_mask[:, e])[0]
        if len(idx) == 0:
            continue
        onehot = np.zeros((decision.num_choices, 1), dtype=x.data.dtype)
        onehot[e, 0] = 1.0
        w_col = T.matmul(T.index_select(weights, decision.unit_of_token[idx]), onehot)
        out_e = fns[e](T.index_select(x, idx))
        parts.append(T.scatter_rows(T.mul(w_col, out_e), idx, num_tokens))
    if not parts:
        return T.mul(x, 0.0)
    y = parts[0]
    for p in parts[1:]:
        y = y + p
    return y


def dispatch_stats(decision: RoutingDecision, dist: Tensor, pad_mask: np.ndarray | None,
                   overflow: int = 0, dropped: int = 0) -> DispatchStats:
    """Hard/soft utilization per expert over non-pad tokens."""
    tokens = decision.unit_of_token
    keep = np.ones(len(tokens), dtype=bool) if pad_mask is None \
        else np.asarray(pad_mask, dtype=bool)
    n = decision.num_choices
    top1 = decision.indices[:, 0][tokens]
    counts_top1 = np.bincount(top1[keep & (top1 >= 0)], minlength=n).astype(np.float64)
    total = max(int(keep.sum()), 1)
    token_fraction = counts_top1 / total
    token_dist = dist.data[tokens][keep]
    mean_prob = token_dist.mean(axis=0) if len(token_dist) else np.zeros(n)
    sel = decision.selection_mask()[tokens]
    token_counts = sel[keep].sum(axis=0).astype(np.int64)
    return DispatchStats(token_fraction=token_fraction, mean_prob=mean_prob,
                         token_counts=token_counts, dropped_tokens=dropped,
                         overflow_events=overflow)


def aux_load_balance_loss(decision: RoutingDecision, dist: Tensor,
                          pad_mask: np.ndarray | None = None) -> Tensor:
    """Load-balancing surrogate N * sum_e f_e * P_e.

    f_e is the (constant) fraction of tokens hard-assigned to expert e
    by their top-1 selection; P_e is the mean soft gate probability,
    through which gradients flow.
    """
    tokens = decision.unit_of_token
    if len(tokens) == 0:
        raise ContractError("aux loss requires at least one token")
    keep = np.ones(len(tokens), dtype=bool) if pad_mask is None \
        else np.asarray(pad_mask, dtype=bool)
    total = int(keep.sum())
    if total == 0:
        raise ContractError("aux loss requires at least one non-pad token")
    n = decision.num_choices
    top1 = decision.indices[:, 0][tokens]
    f = np.bincount(top1[keep & (top1 >= 0)], minlength=n).astype(np.float64) / total

    # P_e = mean over kept tokens of their unit's gate row.
    avg = np.zeros((1, len(dist.data)), dtype=dist.data.dtype)
    avg[0] = np.bincount(tokens[keep], minlength=len(dist.data)) / total
    p = T.matmul(Tensor(avg), dist)  # [1, N]
    return T.tsum(T.mul(p, (n * f).reshape(1, n)))


def moe_forward(x: Tensor, layer: MoELayer, sentence_ids: np.ndarray | None = None,
                pad_mask: np.ndarray | None = None, task_rows: Tensor | None = None,
                decision: RoutingDecision | None = None
                ) -> tuple[Tensor, Tensor, DispatchStats, RoutingDecision]:
    """Full MoE layer: gate, select, dispatch, combine.

    x: [tokens, d_model]. task_rows (same leading dim) is concatenated
    onto the gate input in shared-dynamic models. Passing a previous
    ``decision`` freezes routing (used by gradient checks).

    Returns (y, aux_loss, stats, decision); y excludes the residual,
    which the enclosing block adds.
    """
    num_tokens = x.shape[0]
    gate_in = x if task_rows is None else T.concat([x, task_rows], axis=1)

    if layer.granularity == "sentence":
        if sentence_ids is None:
            raise ContractError("sentence granularity requires sentence_ids")
        sent = np.asarray(sentence_ids, dtype=np.int64)
        num_sent = int(sent.max()) + 1 if len(sent) else 0
        pooled = T.segment_mean(gate_in, sent, num_sent, token_mask=pad_mask)
        dist = gate_forward(pooled, layer.w_g)
        unit_of_token = sent
    else:
        dist = gate_forward(gate_in, layer.w_g)
        unit_of_token = np.arange(num_tokens, dtype=np.int64)

    overflow = dropped = 0
    if decision is None:
        decision = top_k_select(dist.data, layer.k, unit_of_token)
        if layer.capacity_factor is not None:
            decision, overflow, dropped = apply_capacity(decision, layer.capacity_factor)

    # Capacity re-expresses sentence decisions token-granularly; align
    # the gate distribution with whatever units the decision uses.
    if decision.num_units == dist.shape[0]:
        unit_dist = dist
    else:
        unit_dist = T.index_select(dist, unit_of_token)

    weights = combine_weights(unit_dist, decision)
    fns = [e.forward for e in layer.experts]
    y = sparse_dispatch(x, weights, decision, fns)
    aux = aux_load_balance_loss(decision, unit_dist, pad_mask)
    stats = dispatch_stats(decision, unit_dist, pad_mask, overflow, dropped)
    return y, aux, stats, decision
