"""Encoder-decoder transformer with optional MoE layers and task adapters.

One Model class covers every variant in the experiment matrix: dense,
MoE with token- or sentence-level routing, and any of those combined
with static / dynamic / shared-dynamic task adapter banks.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .adapters import TaskAdapterBank, TaskEmbeddingTable, adapter_count, bank_forward
from .errors import ConfigError, ContractError, UnknownTaskError
from .moe import Expert, MoELayer, moe_forward
from .tensor import Tensor

NEG_INF = -1e9


# -- configuration -----------------------------------------------------


@dataclass
class MoESettings:
    num_experts: int = 8
    k: int = 1
    granularity: str = "token"          # "token" | "sentence"
    capacity_factor: float | None = None


@dataclass
class AdapterSettings:
    mode: str = "dynamic"               # "static" | "dynamic" | "shared_dynamic"
    d_task: int = 64
    d_adapter: int = 256
    k_t: int = 2                        # adapters mixed per token (clamped to L)
    num_adapters: int | None = None     # override for merged models


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    dropout: float = 0.1
    max_len: int = 64
    pad_index: int = 0
    seed: int = 0
    moe: MoESettings | None = None
    adapters: AdapterSettings | None = None

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.moe is not None and self.moe.k > self.moe.num_experts:
            raise ConfigError("moe.k exceeds moe.num_experts")
        if self.adapters is not None and self.adapters.mode == "shared_dynamic" \
                and self.moe is None:
            raise ConfigError("shared_dynamic adapters require an MoE layer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("moe"):
            d["moe"] = MoESettings(**d["moe"])
        else:
            d["moe"] = None
        if d.get("adapters"):
            d["adapters"] = AdapterSettings(**d["adapters"])
        else:
            d["adapters"] = None
        return cls(**d)


PRESETS = {
    # CPU-minutes scale; what every test uses.
    "desk": dict(n_layers_enc=2, n_layers_dec=2, d_model=64, d_ff=256,
                 n_heads=4, dropout=0.1, max_len=64),
    # Published configuration, kept for documentation and shape checks.
    "paper": dict(n_layers_enc=12, n_layers_dec=12, d_model=1024, d_ff=4096,
                  n_heads=16, dropout=0.3, max_len=256),
}

# Adapter dims per preset (task-embedding dim, adapter hidden dim).
ADAPTER_DIMS = {"desk": (16, 32), "paper": (64, 256)}

VARIANTS = (
    "dense", "moe-token", "moe-sentence",
    "moe-task-static", "moe-task-dynamic", "moe-task-shared-dynamic",
    "dense-task-static", "dense-task-dynamic",
)


def variant_config(variant: str, vocab_size: int, preset: str = "desk",
                   seed: int = 0, num_experts: int = 8, **overrides) -> ModelConfig:
    """ModelConfig for one named experiment variant."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {tuple(PRESETS)}")
    base = dict(PRESETS[preset])
    d_task, d_adapter = ADAPTER_DIMS[preset]
    moe = None
    adapters = None
    if variant == "moe-sentence":
        moe = MoESettings(num_experts=num_experts, granularity="sentence")
    elif variant.startswith("moe"):
        moe = MoESettings(num_experts=num_experts, granularity="token")
    if "task" in variant:
        mode = variant.split("task-")[1].replace("-", "_")
        adapters = AdapterSettings(mode=mode, d_task=d_task, d_adapter=d_adapter)
    base.update(overrides)
    cfg = ModelConfig(vocab_size=vocab_size, seed=seed, moe=moe, adapters=adapters, **base)
    cfg.validate()
    return cfg


# -- building blocks ---------------------------------------------------


class Linear:
    def __init__(self, rng, d_in: int, d_out: int):
        self.w = T.Tensor(T.xavier(rng, d_in, d_out), requires_grad=True)
        self.b = T.Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def parameters(self):
        return [self.w, self.b]

    def named_parameters(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, d: int):
        self.g = T.Tensor(np.ones(d), requires_grad=True)
        self.b = T.Tensor(np.zeros(d), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(T.layer_norm(x), self.g) + self.b

    def parameters(self):
        return [self.g, self.b]

    def named_parameters(self, prefix):
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


class MultiHeadAttention:
    def __init__(self, rng, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_model = d_model
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def _split(self, x2d: Tensor, batch: int, seqlen: int) -> Tensor:
        h = T.reshape(x2d, (batch, seqlen, self.n_heads, self.d_head))
        return T.reshape(T.transpose(h, (0, 2, 1, 3)),
                         (batch * self.n_heads, seqlen, self.d_head))

    def forward(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None,
                batch: int, sq: int, sk: int) -> Tensor:
        """q_in: [batch*sq, d], kv_in: [batch*sk, d]; mask additive [batch*H, sq, sk]."""
        q = self._split(self.wq.forward(q_in), batch, sq)
        k = self._split(self.wk.forward(kv_in), batch, sk)
        v = self._split(self.wv.forward(kv_in), batch, sk)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.d_head))
        if mask is not None:
            scores = scores + mask
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(ctx, (batch, self.n_heads, sq, self.d_head))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch * sq, self.d_model))
        return self.wo.forward(ctx)

    def parameters(self):
        return (self.wq.parameters() + self.wk.parameters()
                + self.wv.parameters() + self.wo.parameters())

    def named_parameters(self, prefix):
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.named_parameters(f"{prefix}.{name}"))
        return out


@dataclass
class _Ctx:
    """Per-forward plumbing threaded through the blocks."""
    train: bool
    step: int
    aux: list = field(default_factory=list)
    routing: list | None = None       # (site, decision, stats, task_of_token, pad_keep)
    frozen: dict | None = None        # site -> RoutingDecision
    src_task_tok: np.ndarray | None = None
    tgt_task_tok: np.ndarray | None = None
    src_pad_keep: np.ndarray | None = None
    tgt_pad_keep: np.ndarray | None = None
    src_sent: np.ndarray | None = None
    tgt_sent: np.ndarray | None = None


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    enc = np.zeros((max_len, d_model))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


class _Block:
    """Shared skeleton of encoder and decoder blocks (pre-LN)."""

    def __init__(self, model: "Model", rng, is_decoder: bool, index: int):
        cfg = model.config
        d = cfg.d_model
        self.model = model
        self.is_decoder = is_decoder
        self.site = ("dec" if is_decoder else "enc") + f".{index}"
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, cfg.n_heads)
        if is_decoder:
            self.ln_cross = LayerNorm(d)
            self.cross_attn = MultiHeadAttention(rng, d, cfg.n_heads)
        self.ln2 = LayerNorm(d)
        if cfg.moe is not None:
            gate_extra = 0
            if cfg.adapters is not None and cfg.adapters.mode == "shared_dynamic":
                gate_extra = cfg.adapters.d_task
            self.moe = MoELayer(rng, d, cfg.d_ff, num_experts=cfg.moe.num_experts,
                                k=cfg.moe.k, granularity=cfg.moe.granularity,
                                capacity_factor=cfg.moe.capacity_factor,
                                gate_input_dim=d + gate_extra)
            self.ffn = None
        else:
            self.ffn = Expert(rng, d, cfg.d_ff)
            self.moe = None
        if cfg.adapters is not None:
            self.bank = TaskAdapterBank(
                rng, cfg.adapters.mode, d, model.task_embedding,
                num_adapters=model.num_adapters, d_adapter=cfg.adapters.d_adapter,
                k_t=cfg.adapters.k_t)
        else:
            self.bank = None

    # dropout sites are keyed by (seed, stable site hash, step) so runs
    # are bit-reproducible regardless of call interleaving
    def _drop(self, x: Tensor, ctx: _Ctx, tag: str) -> Tensor:
        return self.model.dropout_site(x, ctx, f"{self.site}.{tag}")

    def forward(self, x2d: Tensor, ctx: _Ctx, batch: int, seqlen: int,
                self_mask, memory: Tensor | None = None,
                cross_mask=None, mem_len: int = 0) -> Tensor:
        normed = self.ln1.forward(x2d)
        x2d = x2d + self._drop(
            self.self_attn.forward(normed, normed, self_mask, batch, seqlen, seqlen),
            ctx, "attn")
        if self.is_decoder:
            x2d = x2d + self._drop(
                self.cross_attn.forward(self.ln_cross.forward(x2d), memory,
                                        cross_mask, batch, seqlen, mem_len),
                ctx, "cross")

        task_tok = ctx.tgt_task_tok if self.is_decoder else ctx.src_task_tok
        pad_keep = ctx.tgt_pad_keep if self.is_decoder else ctx.src_pad_keep
        sent = ctx.tgt_sent if self.is_decoder else ctx.src_sent

        h = self.ln2.forward(x2d)
        if self.moe is not None:
            task_rows = None
            if self.model.shares_task_embedding_with_moe:
                task_rows = self.model.task_embedding.rows(task_tok)
            frozen_key = f"{self.site}.moe"
            prev = ctx.frozen.get(frozen_key) if ctx.frozen is not None else None
            out, aux, stats, decision = moe_forward(
                h, self.moe, sentence_ids=sent, pad_mask=pad_keep,
                task_rows=task_rows, decision=prev)
            if ctx.frozen is not None:
                ctx.frozen.setdefault(frozen_key, decision)
            ctx.aux.append(aux)
            if ctx.routing is not None:
                ctx.routing.append((frozen_key, decision, stats, task_tok, pad_keep, sent))
        else:
            out = self.ffn.forward(h)
        x2d = x2d + self._drop(out, ctx, "ffn")

        if self.bank is not None:
            frozen_key = f"{self.site}.bank"
            prev = ctx.frozen.get(frozen_key) if ctx.frozen is not None else None
            x2d, stats, decision = bank_forward(x2d, task_tok, self.bank,
                                                pad_mask=pad_keep, decision=prev)
            if ctx.frozen is not None:
                ctx.frozen.setdefault(frozen_key, decision)
            if ctx.routing is not None:
                ctx.routing.append((frozen_key, decision, stats, task_tok, pad_keep, None))
        return x2d

    def parameters(self):
        out = self.ln1.parameters() + self.self_attn.parameters()
        if self.is_decoder:
            out += self.ln_cross.parameters() + self.cross_attn.parameters()
        out += self.ln2.parameters()
        out += (self.moe.parameters() if self.moe is not None else self.ffn.parameters())
        if self.bank is not None:
            out += self.bank.parameters()
        return out

    def named_parameters(self):
        p = self.site
        out = {}
        out.update(self.ln1.named_parameters(f"{p}.ln1"))
        out.update(self.self_attn.named_parameters(f"{p}.attn"))
        if self.is_decoder:
            out.update(self.ln_cross.named_parameters(f"{p}.ln_cross"))
            out.update(self.cross_attn.named_parameters(f"{p}.cross_attn"))
        out.update(self.ln2.named_parameters(f"{p}.ln2"))
        if self.moe is not None:
            out.update(self.moe.named_parameters(f"{p}.moe"))
        else:
            out.update(self.ffn.named_parameters(f"{p}.ffn"))
        if self.bank is not None:
            out.update(self.bank.named_parameters(f"{p}.bank"))
        return out


@dataclass
class ForwardResult:
    logits: Tensor                   # [batch, tgt_len, vocab]
    aux_loss: Tensor                 # scalar (0 when no MoE layers)
    routing: list | None = None


class Model:
    """Assembled encoder-decoder with a task registry."""

    def __init__(self, config: ModelConfig, task_names: list[str],
                 num_adapters: int | None = None):
        config.validate()
        self.config = config
        self.task_names = list(task_names)
        rng = np.random.default_rng(config.seed)
        d = config.d_model

        if config.adapters is not None:
            self.task_embedding = TaskEmbeddingTable(rng, self.task_names,
                                                     d_task=config.adapters.d_task)
            self.num_adapters = (num_adapters if num_adapters is not None
                                 else config.adapters.num_adapters)
            if self.num_adapters is None:
                self.num_adapters = adapter_count(len(self.task_names),
                                                  config.adapters.mode)
        else:
            self.task_embedding = None
            self.num_adapters = 0
        self.shares_task_embedding_with_moe = (
            config.adapters is not None and config.adapters.mode == "shared_dynamic")

        self.tok_emb = T.Tensor(rng.normal(0, 0.02, (config.vocab_size, d)),
                                requires_grad=True)
        self.pos = sinusoidal_positions(config.max_len, d).astype(T.DTYPE)
        self.enc_blocks = [_Block(self, rng, False, i) for i in range(config.n_layers_enc)]
        self.dec_blocks = [_Block(self, rng, True, i) for i in range(config.n_layers_dec)]
        self.enc_ln = LayerNorm(d)
        self.dec_ln = LayerNorm(d)
        self.out_proj = Linear(rng, d, config.vocab_size)
        self._frozen: dict | None = None

    # -- parameters ----------------------------------------------------

    def parameters(self):
        return list(self.named_parameters().values())

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb.w": self.tok_emb}
        if self.task_embedding is not None:
            out["task_embedding.table"] = self.task_embedding.table
        for b in self.enc_blocks + self.dec_blocks:
            out.update(b.named_parameters())
        out.update(self.enc_ln.named_parameters("enc_ln"))
        out.update(self.dec_ln.named_parameters("dec_ln"))
        out.update(self.out_proj.named_parameters("out_proj"))
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def task_index(self, name: str) -> int:
        try:
            return self.task_names.index(name)
        except ValueError:
            raise UnknownTaskError(f"task {name!r} is not registered")

    # -- routing freeze (gradient checks) ------------------------------

    def freeze_routing(self) -> None:
        """Reuse the next forward's routing decisions on later forwards."""
        self._frozen = {}

    def unfreeze_routing(self) -> None:
        self._frozen = None

    # -- dropout -------------------------------------------------------

    def dropout_site(self, x: Tensor, ctx: _Ctx, tag: str) -> Tensor:
        if not ctx.train or self.config.dropout <= 0:
            return x
        key = np.array([((self.config.seed & 0xFFFFFFFF) << 32)
                        | zlib.crc32(tag.encode()),
                        ctx.step], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        return T.dropout(x, self.config.dropout, rng)

    # -- masks ---------------------------------------------------------

    def _attn_mask(self, key_pad: np.ndarray, sq: int, causal: bool) -> np.ndarray:
        batch, sk = key_pad.shape
        m = np.zeros((batch, sq, sk), dtype=T.DTYPE)
        m[key_pad[:, None, :].repeat(sq, axis=1)] = NEG_INF
        if causal:
            tri = np.triu(np.full((sq, sk), NEG_INF, dtype=T.DTYPE), k=1)
            m = m + tri
        return np.repeat(m, self.config.n_heads, axis=0)

    # -- forward -------------------------------------------------------

    def _check_tokens(self, ids: np.ndarray, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ContractError(f"{what} token id outside vocabulary")
        return ids

    def _make_ctx(self, src: np.ndarray, tgt: np.ndarray | None,
                  task_idx: np.ndarray, train: bool, step: int,
                  collect_routing: bool) -> _Ctx:
        batch, ss = src.shape
        task_idx = np.asarray(task_idx, dtype=np.int64)
        if task_idx.shape != (batch,):
            raise ContractError(f"task_idx must have shape ({batch},)")
        if task_idx.size and (task_idx.min() < 0 or task_idx.max() >= len(self.task_names)):
            raise UnknownTaskError("task index outside registry")
        ctx = _Ctx(train=train, step=step,
                   routing=[] if collect_routing else None, frozen=self._frozen)
        pad = self.config.pad_index
        ctx.src_task_tok = np.repeat(task_idx, ss)
        ctx.src_pad_keep = (src != pad).reshape(-1)
        ctx.src_sent = np.repeat(np.arange(batch), ss)
        if tgt is not None:
            st = tgt.shape[1]
            ctx.tgt_task_tok = np.repeat(task_idx, st)
            ctx.tgt_pad_keep = (tgt != pad).reshape(-1)
            ctx.tgt_sent = np.repeat(np.arange(batch), st)
        return ctx

    def _embed(self, ids: np.ndarray, ctx: _Ctx, tag: str) -> Tensor:
        batch, s = ids.shape
        if s > self.config.max_len:
            raise ContractError(f"sequence length {s} exceeds max_len {self.config.max_len}")
        e = T.mul(T.embedding_lookup(self.tok_emb, ids.reshape(-1)),
                  math.sqrt(self.config.d_model))
        e = e + np.tile(self.pos[:s], (batch, 1))
        return self.dropout_site(e, ctx, tag)

    def encode(self, src: np.ndarray, ctx: _Ctx) -> Tensor:
        batch, ss = src.shape
        x = self._embed(src, ctx, "emb.src")
        pad = ~ctx.src_pad_keep.reshape(batch, ss)
        mask = self._attn_mask(pad, ss, causal=False)
        for b in self.enc_blocks:
            x = b.forward(x, ctx, batch, ss, mask)
        return self.enc_ln.forward(x)

    def decode(self, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray,
               ctx: _Ctx) -> Tensor:
        batch, st = tgt_in.shape
        ss = src.shape[1]
        x = self._embed(tgt_in, ctx, "emb.tgt")
        tgt_pad = ~ctx.tgt_pad_keep.reshape(batch, st)
        self_mask = self._attn_mask(tgt_pad, st, causal=True)
        src_pad = ~ctx.src_pad_keep.reshape(batch, ss)
        cross_mask = self._attn_mask(src_pad, st, causal=False)
        for b in self.dec_blocks:
            x = b.forward(x, ctx, batch, st, self_mask,
                          memory=memory, cross_mask=cross_mask, mem_len=ss)
        x = self.dec_ln.forward(x)
        logits = self.out_proj.forward(x)
        return T.reshape(logits, (batch, st, self.config.vocab_size))

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, task_idx,
                train: bool = False, step: int = 0,
                collect_routing: bool = False) -> ForwardResult:
        """Teacher-forced pass. Returns logits [batch, tgt_len, vocab]."""
        src = self._check_tokens(src, "source")
        tgt_in = self._check_tokens(tgt_in, "target")
        ctx = self._make_ctx(src, tgt_in, np.asarray(task_idx), train, step,
                             collect_routing)
        memory = self.encode(src, ctx)
        logits = self.decode(memory, src, tgt_in, ctx)
        if ctx.aux:
            aux = ctx.aux[0]
            for a in ctx.aux[1:]:
                aux = aux + a
        else:
            aux = Tensor(0.0)
        return ForwardResult(logits=logits, aux_loss=aux, routing=ctx.routing)


def greedy_decode(model: Model, src: np.ndarray, task_idx, max_len: int,
                  bos: int, eos: int) -> list[list[int]]:
    """Batched argmax decoding until eos or max_len (eval mode, deterministic)."""
    src = np.asarray(src, dtype=np.int64)
    batch = src.shape[0]
    task_idx = np.asarray(task_idx, dtype=np.int64)
    if max_len <= 0:
        return [[] for _ in range(batch)]
    tgt = np.full((batch, 1), bos, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    ctx0 = model._make_ctx(src, None, task_idx, False, 0, False)
    memory = model.encode(src, ctx0)
    for _ in range(max_len):
        ctx = model._make_ctx(src, tgt, task_idx, False, 0, False)
        logits = model.decode(memory, src, tgt, ctx)
        nxt = logits.data[:, -1, :].argmax(axis=1)
        nxt = np.where(done, model.config.pad_index, nxt)
        tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
        done |= nxt == eos
        if done.all():
            break
    out = []
    for row in tgt[:, 1:]:
        seq = []
        for t in row:
            if t == eos or t == model.config.pad_index:
                break
            seq.append(int(t))
        out.append(seq)
    return out
