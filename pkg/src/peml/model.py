"""Toy transformer encoder with frozen base weights, LoRA adapters on the
attention projections and per-block prefix key/value injection."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, StateError, TaskError

PROJECTIONS = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    vocab_size: int = 64
    max_seq: int = 16
    n_classes: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    d_ff: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("key", "value")
    lora_dropout: float = 0.0
    lora_init_std: float = 0.02

    def __post_init__(self):
        self.n_classes = [int(c) for c in self.n_classes]
        self.lora_targets = tuple(self.lora_targets)
        sizes = dict(d_model=self.d_model, n_heads=self.n_heads, n_blocks=self.n_blocks,
                     vocab_size=self.vocab_size, max_seq=self.max_seq, d_ff=self.d_ff,
                     lora_rank=self.lora_rank)
        for name, v in sizes.items():
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v}")
        if not self.n_classes or min(self.n_classes) < 1:
            raise ConfigurationError("n_classes must be a nonempty list of positive ints")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank > self.d_model // 2:
            raise ConfigurationError(f"lora_rank={self.lora_rank} exceeds d_model/2")
        bad = [t for t in self.lora_targets if t not in PROJECTIONS]
        if bad:
            raise ConfigurationError(f"unknown LoRA targets {bad}; choose from {list(PROJECTIONS)}")
        if self.lora_alpha <= 0 or self.lora_init_std < 0 or not 0 <= self.lora_dropout < 1:
            raise ConfigurationError("invalid LoRA alpha/init_std/dropout")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


# -- base weights ----------------------------------------------------------------

class BaseWeights:
    """Named float64 arrays for every frozen parameter (θ).

    The arrays are marked read-only; any attempt to mutate them in place raises.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {}
        for k, v in params.items():
            arr = np.array(v, dtype=np.float64)
            arr.setflags(write=False)
            self.params[k] = arr
        self._tensors = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(v.size for v in self.params.values())

    def tensors(self) -> dict[str, Tensor]:
        if self._tensors is None:
            ts = {}
            for k, v in self.params.items():
                t = Tensor(0.0)
                t.data = v  # shares the read-only array
                ts[k] = t
            self._tensors = ts
        return self._tensors

    def replace(self, updates: dict[str, np.ndarray]) -> "BaseWeights":
        merged = dict(self.params)
        merged.update(updates)
        return BaseWeights(merged)


def init_base(config: ModelConfig, rng: np.random.Generator) -> BaseWeights:
    d, f = config.d_model, config.d_ff
    p = {"embed": rng.normal(0, 1.0, (config.vocab_size, d)),
         "pos": rng.normal(0, 0.5, (config.max_seq, d))}
    for b in range(config.n_blocks):
        pre = f"blocks.{b}."
        for w in PROJECTIONS.values():
            p[pre + w] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p[pre + "w1"] = rng.normal(0, 1 / math.sqrt(d), (f, d))
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = rng.normal(0, 1 / math.sqrt(f), (d, f))
        p[pre + "b2"] = np.zeros(d)
    p["ln_f.g"], p["ln_f.b"] = np.ones(d), np.zeros(d)
    for i, c in enumerate(config.n_classes):
        p[f"heads.{i}.w"] = rng.normal(0, 1 / math.sqrt(d), (c, d))
        p[f"heads.{i}.b"] = np.zeros(c)
    return BaseWeights(p)


# -- LoRA -----------------------------------------------------------------------

@dataclass
class LoraAdapter:
    block: int
    target: str
    B: Tensor  # d_model x r
    A: Tensor  # d_model x r
    scale: float
    dropout_p: float = 0.0

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data.T)


class LoraAdapters:
    """Adapters keyed by (block index, projection name)."""

    def __init__(self, adapters: list[LoraAdapter] | None = None):
        self.items: dict[tuple[int, str], LoraAdapter] = {}
        for a in adapters or []:
            self.items[(a.block, a.target)] = a

    def get(self, block: int, target: str) -> LoraAdapter | None:
        return self.items.get((block, target))

    def parameters(self) -> list[Tensor]:
        out = []
        for key in sorted(self.items):
            out += [self.items[key].B, self.items[key].A]
        return out

    def count(self) -> int:
        return sum(a.B.size + a.A.size for a in self.items.values())

    def __len__(self):
        return len(self.items)

    def validate(self, config: ModelConfig) -> None:
        d = config.d_model
        for (b, t), a in self.items.items():
            if not 0 <= b < config.n_blocks or t not in PROJECTIONS:
                raise ConfigurationError(f"adapter targets missing projection block={b} target={t!r}")
            if a.B.shape != a.A.shape or a.B.shape[0] != d:
                raise DimensionError(f"adapter ({b}, {t}): B {a.B.shape} / A {a.A.shape} vs d_model {d}")


def init_lora(config: ModelConfig, rng: np.random.Generator,
              targets: tuple[str, ...] | None = None) -> LoraAdapters:
    """B = 0 and A ~ N(0, σ²) for every targeted projection of every block."""
    targets = config.lora_targets if targets is None else targets
    d, r = config.d_model, config.lora_rank
    out = []
    for b in range(config.n_blocks):
        for t in targets:
            if t not in PROJECTIONS:
                raise ConfigurationError(f"unknown LoRA target {t!r}")
            out.append(LoraAdapter(b, t, Tensor(np.zeros((d, r)), requires_grad=True),
                                   Tensor(rng.normal(0, config.lora_init_std, (d, r)), requires_grad=True),
                                   config.lora_scale, config.lora_dropout))
    return LoraAdapters(out)


@dataclass
class Context:
    """Forward-pass mode plus the dropout stream used in train mode."""
    training: bool = False
    stream: ad.DropoutStream | None = None

    def rng(self):
        return self.stream.next() if (self.training and self.stream is not None) else None


EVAL = Context(False, None)


def lora_project(x: Tensor, w: Tensor, adapter: LoraAdapter | None, mode: str = "live",
                 ctx: Context = EVAL) -> Tensor:
    """Apply a (d_out, d_in) projection with an optional LoRA delta.

    live:   W x + scale * B (A^T x)   (adapter path kept separate)
    merged: (W + scale * B A^T) x     (materialized matrix)
    """
    if adapter is None:
        return ad.matmul(x, w.T)
    if mode == "live":
        xin = x
        if adapter.dropout_p > 0 and ctx.training:
            xin = ad.dropout(x, adapter.dropout_p, ctx.rng(), True)
        low = ad.matmul(ad.matmul(xin, adapter.A), adapter.B.T)
        return ad.add(ad.matmul(x, w.T), ad.scale(low, adapter.scale))
    if mode == "merged":
        weff = ad.add(w, ad.scale(ad.matmul(adapter.B, adapter.A.T), adapter.scale))
        return ad.matmul(x, weff.T)
    raise ConfigurationError(f"unknown LoRA mode {mode!r}")


def apply_lora(base: BaseWeights, adapters: LoraAdapters, block: int, target: str,
               mode: str = "merged"):
    """Effective projection for one (block, target).

    ``merged`` returns the materialized matrix W + scale·BAᵀ; ``live`` returns a
    callable ``x -> Wx + scale·B(Aᵀx)``.
    """
    name = f"blocks.{block}.{PROJECTIONS.get(target, '?')}"
    if name not in base.params:
        raise ConfigurationError(f"no projection {target!r} in block {block}")
    w = base.params[name]
    adapter = adapters.get(block, target) if adapters is not None else None
    if mode == "merged":
        return w if adapter is None else w + adapter.delta()
    if mode == "live":
        wt = Tensor(w)
        return lambda x: lora_project(ad.as_tensor(x), wt, adapter, "live")
    raise ConfigurationError(f"unknown LoRA mode {mode!r}")


# -- prefix + attention ---------------------------------------------------------

@dataclass
class PrefixKV:
    keys: Tensor    # l x d_model
    values: Tensor  # l x d_model

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 2:
            raise DimensionError(f"prefix keys {self.keys.shape} and values {self.values.shape} must match (l, d)")

    @property
    def length(self) -> int:
        return self.keys.shape[0]


def empty_prefix(n_blocks: int, d_model: int) -> list[PrefixKV]:
    return [PrefixKV(Tensor(np.zeros((0, d_model))), Tensor(np.zeros((0, d_model))))
            for _ in range(n_blocks)]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., S, d) -> (..., H, S, dh)
    *lead, s, d = x.shape
    y = ad.reshape(x, (*lead, s, n_heads, d // n_heads))
    nd = y.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.transpose(y, tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return ad.reshape(ad.transpose(x, tuple(axes)), (*lead, s, h * dh))


def attention_with_prefix(hidden: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                          n_heads: int, prefix: PrefixKV | None = None,
                          adapters: dict[str, LoraAdapter] | None = None, mode: str = "live",
                          ctx: Context = EVAL, return_weights: bool = False):
    """Multi-head attention over (l + seq) keys with prefix keys/values prepended.

    ``hidden`` is (seq, d) or (batch, seq, d).  LoRA deltas are added to the
    projections before the heads are split; prefix rows are already in the
    key/value space and bypass the projections.
    """
    adapters = adapters or {}
    d = hidden.shape[-1]
    if d % n_heads:
        raise DimensionError(f"hidden width {d} not divisible by {n_heads} heads")
    q = lora_project(hidden, wq, adapters.get("query"), mode, ctx)
    k = lora_project(hidden, wk, adapters.get("key"), mode, ctx)
    v = lora_project(hidden, wv, adapters.get("value"), mode, ctx)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    if prefix is not None and prefix.length > 0:
        if prefix.keys.shape[1] != d:
            raise DimensionError(f"prefix width {prefix.keys.shape[1]} != d_model {d}")
        pk = _split_heads(prefix.keys, n_heads)
        pv = _split_heads(prefix.values, n_heads)
        lead = kh.shape[:-2]
        pk = ad.broadcast_to(pk, (*lead, *pk.shape[-2:]))
        pv = ad.broadcast_to(pv, (*lead, *pv.shape[-2:]))
        kh = ad.concat([pk, kh], axis=-2)
        vh = ad.concat([pv, vh], axis=-2)
    dh = d // n_heads
    nd = kh.ndim
    kt = ad.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    out = _merge_heads(ad.matmul(weights, vh))
    out = lora_project(out, wo, adapters.get("output"), mode, ctx)
    return (out, weights) if return_weights else out


# -- full model -------------------------------------------------------------------

class ToyTransformer:
    """Pre-LN encoder, mean pooling, one linear head per task."""

    def __init__(self, config: ModelConfig, base: BaseWeights, merged: bool = False):
        self.config = config
        self.base = base
        self.merged = merged

    def parameter_count(self) -> int:
        return self.base.count()

    def _check_task(self, task_id) -> None:
        n = len(self.config.n_classes)
        if not isinstance(task_id, (int, np.integer)) or not 0 <= task_id < n:
            raise TaskError(f"unknown task_id {task_id!r}; model has {n} heads")

    def encode(self, tokens, prefix: list[PrefixKV] | None = None,
               adapters: LoraAdapters | None = None, mode: str = "live",
               ctx: Context = EVAL, weights: dict[str, Tensor] | None = None) -> Tensor:
        """Mean-pooled final hidden states, shape (batch, d_model)."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        s = tokens.shape[1]
        if s > cfg.max_seq:
            raise DimensionError(f"sequence length {s} exceeds max_seq {cfg.max_seq}")
        if prefix is not None and len(prefix) != cfg.n_blocks:
            raise DimensionError(f"expected {cfg.n_blocks} prefixes, got {len(prefix)}")
        w = weights if weights is not None else self.base.tensors()
        h = ad.add(ad.embedding(w["embed"], tokens), ad.getitem(w["pos"], slice(0, s)))
        for b in range(cfg.n_blocks):
            pre = f"blocks.{b}."
            blk_adapters = {}
            if adapters is not None:
                for t in PROJECTIONS:
                    a = adapters.get(b, t)
                    if a is not None:
                        blk_adapters[t] = a
            x = ad.layer_norm(h, w[pre + "ln1.g"], w[pre + "ln1.b"])
            att = attention_with_prefix(x, w[pre + "wq"], w[pre + "wk"], w[pre + "wv"], w[pre + "wo"],
                                        cfg.n_heads, prefix[b] if prefix is not None else None,
                                        blk_adapters, mode, ctx)
            h = ad.add(h, att)
            x = ad.layer_norm(h, w[pre + "ln2.g"], w[pre + "ln2.b"])
            x = ad.gelu(ad.add(ad.matmul(x, w[pre + "w1"].T), w[pre + "b1"]))
            h = ad.add(h, ad.add(ad.matmul(x, w[pre + "w2"].T), w[pre + "b2"]))
        h = ad.layer_norm(h, w["ln_f.g"], w["ln_f.b"])
        return ad.mean(h, axis=1)

    def head(self, pooled: Tensor, task_id: int, weights: dict[str, Tensor] | None = None) -> Tensor:
        self._check_task(task_id)
        w = weights if weights is not None else self.base.tensors()
        return ad.add(ad.matmul(pooled, w[f"heads.{task_id}.w"].T), w[f"heads.{task_id}.b"])

    def forward(self, tokens, task_id: int, prefix: list[PrefixKV] | None = None,
                adapters: LoraAdapters | None = None, mode: str = "live",
                ctx: Context = EVAL, weights: dict[str, Tensor] | None = None) -> Tensor:
        """Logits of shape (batch, n_classes[task_id]).

        ``weights`` substitutes trainable tensors for the frozen ones (used
        only when pretraining the base).
        """
        self._check_task(task_id)
        return self.head(self.encode(tokens, prefix, adapters, mode, ctx, weights), task_id, weights)


def model_forward(model: ToyTransformer, tokens, prefix: list[PrefixKV] | None, task_id: int,
                  adapters: LoraAdapters | None = None, ctx: Context = EVAL) -> Tensor:
    return model.forward(tokens, task_id, prefix, adapters, "live", ctx)


def merge_and_export(model: ToyTransformer, adapters: LoraAdapters | None,
                     discretized: bool = True) -> ToyTransformer:
    """Fold every adapter into its projection: θ + scale·BAᵀ.

    ``discretized`` reports whether the prefix architecture has been finalized;
    merging before that is a state error.
    """
    if not discretized:
        raise StateError("architecture not discretized yet; finish training before merging")
    if adapters is None or len(adapters) == 0:
        return ToyTransformer(model.config, model.base, merged=True)
    adapters.validate(model.config)
    updates = {}
    for (b, t), a in adapters.items.items():
        name = f"blocks.{b}.{PROJECTIONS[t]}"
        updates[name] = model.base.params[name] + a.delta()
    return ToyTransformer(model.config, model.base.replace(updates), merged=True)
