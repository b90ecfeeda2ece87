"""Task-conditioned adapter banks.

Each bank holds small residual bottleneck adapters applied after an
MoE (or dense FFN) block. Three modes:

* ``static``         -- one adapter per task, routed by task index alone.
* ``dynamic``        -- L = ceil(log2 M) shared adapters, routed by a
                        learned gate over concat(token, task embedding).
* ``shared_dynamic`` -- dynamic, with the task-embedding table also
                        feeding the MoE gate (single source of truth).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, UnknownTaskError
from .moe import (RoutingDecision, combine_weights, dispatch_stats, gate_forward,
                  sparse_dispatch, top_k_select)
from .tensor import Tensor

MODES = ("static", "dynamic", "shared_dynamic")


def adapter_count(num_tasks: int, mode: str) -> int:
    """Adapters allocated for M tasks: M if static, else max(1, ceil(log2 M))."""
    if num_tasks < 1:
        raise ConfigError("need at least one task")
    if mode == "static":
        return num_tasks
    if mode in ("dynamic", "shared_dynamic"):
        return max(1, math.ceil(math.log2(num_tasks)))
    raise ConfigError(f"unknown adapter mode {mode!r}")


class TaskEmbeddingTable:
    """One learned row per registered task."""

    def __init__(self, rng: np.random.Generator, task_names: list[str], d_task: int = 64):
        self.names = list(task_names)
        self.d_task = d_task
        self.table = T.Tensor(rng.normal(0, 0.02, (len(self.names), d_task)),
                              requires_grad=True)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownTaskError(f"task {name!r} is not registered")

    def rows(self, task_of_token: np.ndarray) -> Tensor:
        idx = np.asarray(task_of_token, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.names)):
            raise UnknownTaskError(
                f"task index out of range [0, {len(self.names)}): {idx.min()}..{idx.max()}")
        return T.index_select(self.table, idx)


class Adapter:
    """Residual bottleneck: x + w_up . relu(w_down . x + b_down) + b_up.

    w_up starts at zero so a fresh bank is an exact identity; the
    residual is added once by the bank, not here.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, d_adapter: int = 256):
        self.w_down = T.Tensor(T.xavier(rng, d_model, d_adapter), requires_grad=True)
        self.b_down = T.Tensor(np.zeros(d_adapter), requires_grad=True)
        self.w_up = T.Tensor(np.zeros((d_adapter, d_model)), requires_grad=True)
        self.b_up = T.Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(T.matmul(x, self.w_down) + self.b_down)
        return T.matmul(h, self.w_up) + self.b_up

    def parameters(self):
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    def named_parameters(self, prefix: str):
        return {f"{prefix}.w_down": self.w_down, f"{prefix}.b_down": self.b_down,
                f"{prefix}.w_up": self.w_up, f"{prefix}.b_up": self.b_up}


class TaskAdapterBank:
    """Adapters plus (in dynamic modes) a task gate, for one block."""

    def __init__(self, rng: np.random.Generator, mode: str, d_model: int,
                 embedding: TaskEmbeddingTable, num_adapters: int | None = None,
                 d_adapter: int = 256, k_t: int = 2):
        if mode not in MODES:
            raise ConfigError(f"unknown adapter mode {mode!r}")
        self.mode = mode
        self.embedding = embedding
        num_tasks = len(embedding.names)
        self.num_adapters = num_adapters if num_adapters is not None \
            else adapter_count(num_tasks, mode)
        if mode == "static" and self.num_adapters != num_tasks:
            raise ConfigError("static mode requires one adapter per task")
        self.k_t = min(k_t, self.num_adapters)
        self.adapters = [Adapter(rng, d_model, d_adapter) for _ in range(self.num_adapters)]
        if mode == "static":
            self.w_t = None
        else:
            gate_in = d_model + embedding.d_task
            self.w_t = T.Tensor(T.xavier(rng, gate_in, self.num_adapters),
                                requires_grad=True)

    def parameters(self):
        out = []
        for a in self.adapters:
            out.extend(a.parameters())
        if self.w_t is not None:
            out.append(self.w_t)
        return out

    def named_parameters(self, prefix: str):
        out = {}
        for i, a in enumerate(self.adapters):
            out.update(a.named_parameters(f"{prefix}.adapters.{i}"))
        if self.w_t is not None:
            out[f"{prefix}.gate.w_t"] = self.w_t
        return out


def static_route(task_of_token: np.ndarray, bank: TaskAdapterBank) -> RoutingDecision:
    """Identity task -> adapter map, independent of token contents."""
    idx = np.asarray(task_of_token, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= bank.num_adapters):
        raise UnknownTaskError(
            f"task index out of range [0, {bank.num_adapters}): {idx.min()}..{idx.max()}")
    dist = np.zeros((len(idx), bank.num_adapters), dtype=T.DTYPE)
    dist[np.arange(len(idx)), idx] = 1.0
    return RoutingDecision(indices=idx[:, None].copy(), dist=dist,
                           unit_of_token=np.arange(len(idx), dtype=np.int64))


def dynamic_route(x: Tensor, task_of_token: np.ndarray, bank: TaskAdapterBank
                  ) -> tuple[Tensor, RoutingDecision]:
    """Gate over concat(token, task embedding); top-k_t with renormalization."""
    if bank.w_t is None:
        raise ConfigError("dynamic_route requires a dynamic-mode bank")
    gate_in = T.concat([x, bank.embedding.rows(task_of_token)], axis=1)
    dist = gate_forward(gate_in, bank.w_t)
    return dist, top_k_select(dist.data, bank.k_t)


def bank_forward(x: Tensor, task_of_token: np.ndarray, bank: TaskAdapterBank,
                 pad_mask: np.ndarray | None = None,
                 decision: RoutingDecision | None = None):
    """Route tokens to adapters and apply them with a single residual add.

    Returns (y, stats, decision). Passing ``decision`` freezes routing.
    """
    if bank.mode == "static":
        if decision is None:
            decision = static_route(task_of_token, bank)
        dist = Tensor(decision.dist)
    else:
        if decision is None:
            dist, decision = dynamic_route(x, task_of_token, bank)
        else:
            gate_in = T.concat([x, bank.embedding.rows(task_of_token)], axis=1)
            dist = gate_forward(gate_in, bank.w_t)
    weights = combine_weights(dist, decision)
    delta = sparse_dispatch(x, weights, decision, [a.forward for a in bank.adapters])
    stats = dispatch_stats(decision, dist, pad_mask)
    return x + delta, stats, decision


def assignment_histogram(decision: RoutingDecision, task_of_token: np.ndarray,
                         num_tasks: int, num_adapters: int,
                         pad_mask: np.ndarray | None = None) -> np.ndarray:
    """[tasks, adapters] counts of top-1 assignments, for clustering analysis."""
    tasks = np.asarray(task_of_token, dtype=np.int64)
    top1 = decision.indices[:, 0][decision.unit_of_token]
    keep = np.ones(len(tasks), dtype=bool) if pad_mask is None \
        else np.asarray(pad_mask, dtype=bool)
    keep = keep & (top1 >= 0)
    hist = np.zeros((num_tasks, num_adapters), dtype=np.int64)
    np.add.at(hist, (tasks[keep], top1[keep]), 1)
    return hist
