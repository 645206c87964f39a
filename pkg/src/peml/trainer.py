"""Joint optimization of LoRA adapters, the prefix generator and the
architecture parameters over multi-task mini-batches.

One joint step evaluates every gradient at the same parameter point and then
updates all groups together (simultaneous SGD).  In ``simplex``
parameterization the architecture rows are projected back onto the simplex
after each step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TaskCollection
from .errors import ConfigurationError, DataError, NumericError, ParameterError, TaskError
from .model import (Context, LoraAdapters, ModelConfig, ToyTransformer, init_base, init_lora,
                    merge_and_export)
from .optim import Adam, make_optimizer
from .prefixnas import (ArchParams, PrefixGenerator, SearchSpace, discretize, entropy_regularizer,
                        generate_prefix, prune_weak)
from .seeding import substream, subseed
from .simplex import project_simplex

__all__ = ["TrainConfig", "MultiTaskBatch", "StepReport", "TrainState", "TrainResult",
           "build_batch", "joint_loss", "train_step", "train_loop", "project_simplex",
           "convergence_metrics", "evaluate", "init_state", "pretrain_base"]

MODES = ("peml", "lora-only", "prefix-only")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    gamma: float = 0.1
    lam: float = 0.01
    max_epochs: int = 30
    patience: int = 25
    strategy: str = "softmax"
    temperature: float = 1.0
    seed: int = 0
    parameterization: str = "softmax"
    optimizer: str = "adam"
    schedule: str = "constant"          # or "inv_sqrt": lr = c / sqrt(T)
    total_steps: int | None = None      # T of the inv_sqrt schedule
    steps_per_epoch: int | None = None  # default ceil(1 / gamma)
    prefix_length: int = 8
    mode: str = "peml"
    prune_threshold: float | None = None  # None -> 0.2 / k, 0 disables
    per_task_updates: bool = False
    grad_clip: float | None = None
    lr_scale: dict = field(default_factory=lambda: {"lora": 1.0, "prefix": 1.0, "alpha": 1.0})
    lipschitz_every: int = 0             # recompute the cross-gradient every n steps (0: never)

    def __post_init__(self):
        if not (self.lr == 0 or 1e-5 <= self.lr <= 1):
            raise ConfigurationError(f"lr={self.lr} outside [1e-5, 1]")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma={self.gamma} outside (0, 1]")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.patience < 1 or self.max_epochs < 0:
            raise ConfigurationError("patience must be >= 1 and max_epochs >= 0")
        if self.strategy not in ("softmax", "gumbel", "ste"):
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.parameterization not in ("softmax", "simplex"):
            raise ConfigurationError(f"unknown parameterization {self.parameterization!r}")
        if self.parameterization == "simplex" and self.strategy != "softmax":
            raise ConfigurationError("simplex parameterization requires the softmax strategy")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "inv_sqrt"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.prefix_length < 0:
            raise ConfigurationError("prefix_length must be >= 0")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")

    @property
    def epoch_steps(self) -> int:
        return self.steps_per_epoch or math.ceil(1.0 / self.gamma - 1e-9)

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        T = self.total_steps or max(1, self.max_epochs * self.epoch_steps)
        return self.lr / math.sqrt(T)


# -- batches -------------------------------------------------------------------------

@dataclass
class TaskBatch:
    task_id: int
    tokens: np.ndarray
    labels: np.ndarray
    kind: str


@dataclass
class MultiTaskBatch:
    tasks: list[TaskBatch]

    @property
    def sizes(self) -> list[int]:
        return [len(t.labels) for t in self.tasks]


def batch_size(gamma: float, m: int) -> int:
    """max(1, floor(gamma * m)); the 1e-9 guard absorbs binary rounding of gamma."""
    return max(1, int(math.floor(gamma * m + 1e-9)))


def build_batch(datasets, gamma: float, rng: np.random.Generator,
                kinds: list[str] | None = None) -> MultiTaskBatch:
    """Sample b_i = max(1, floor(γ m_i)) examples per task without replacement."""
    if not 0 < gamma <= 1:
        raise ParameterError(f"gamma={gamma} outside (0, 1]")
    if isinstance(datasets, TaskCollection):
        kinds = [t.spec.kind for t in datasets.tasks]
        datasets = [t.splits["train"] for t in datasets.tasks]
    kinds = kinds or ["classification"] * len(datasets)
    out = []
    for i, (ds, kind) in enumerate(zip(datasets, kinds)):
        m = len(ds)
        if m == 0:
            raise DataError(f"task {i} has an empty dataset")
        idx = rng.permutation(m)[:batch_size(gamma, m)]
        out.append(TaskBatch(i, ds.tokens[idx], ds.labels[idx], kind))
    return MultiTaskBatch(out)


# -- state ---------------------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    epoch: int
    task_losses: list[float]
    regularizer: float
    joint_loss: float
    grad_norm_total: float
    grad_norm_lora: float
    grad_norm_prefix: float
    grad_norm_alpha: float
    alpha_variance: float
    lr: float
    alpha_snapshot: np.ndarray | None = None
    cross_lipschitz: float | None = None


@dataclass
class TrainState:
    model: ToyTransformer
    config: TrainConfig
    space: SearchSpace
    adapters: LoraAdapters | None
    generator: PrefixGenerator | None
    arch: ArchParams | None
    optimizer: object
    kinds: list[str]
    step: int = 0
    epoch: int = 0
    dropout_seed: int | None = None

    def groups(self) -> dict[str, list[Tensor]]:
        lora = self.adapters.parameters() if self.adapters is not None else []
        prefix = self.generator.parameters(self.arch) if self.generator is not None else []
        alpha = self.arch.parameters() if (self.arch is not None and not self.arch.discretized) else []
        return {"lora": lora, "prefix": prefix, "alpha": alpha}

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for ps in self.groups().values() for p in ps]


def init_state(model: ToyTransformer, config: TrainConfig, space: SearchSpace,
               kinds: list[str] | None = None) -> TrainState:
    """Fresh adapters (B=0, A~N(0,σ²)), generator, and uniform α."""
    rng = substream(config.seed, "init")
    cfg = model.config
    adapters = init_lora(cfg, rng) if config.mode != "prefix-only" else None
    generator = arch = None
    if config.mode != "lora-only":
        generator = PrefixGenerator(cfg.d_model, cfg.n_blocks, config.prefix_length, space, rng)
        arch = ArchParams.uniform(space, config.parameterization)
    kinds = kinds or ["regression" if c == 1 else "classification" for c in cfg.n_classes]
    return TrainState(model, config, space, adapters, generator, arch,
                      make_optimizer(config.optimizer), kinds)


# -- loss -----------------------------------------------------------------------------

def _task_loss(logits: Tensor, tb: TaskBatch) -> Tensor:
    if tb.kind == "regression":
        return ad.mse(ad.reshape(logits, (logits.shape[0],)), np.asarray(tb.labels, dtype=np.float64))
    return ad.cross_entropy(logits, tb.labels)


def _check_heads(model: ToyTransformer, batch: MultiTaskBatch) -> None:
    ncls = model.config.n_classes
    for tb in batch.tasks:
        if not 0 <= tb.task_id < len(ncls):
            raise TaskError(f"batch task {tb.task_id} has no head")
        want = 1 if tb.kind == "regression" else None
        if want is not None and ncls[tb.task_id] != 1:
            raise TaskError(f"task {tb.task_id} is regression but its head has {ncls[tb.task_id]} outputs")
        if tb.kind == "classification" and ncls[tb.task_id] < 2:
            raise TaskError(f"task {tb.task_id} is classification but its head has 1 output")


def joint_loss(model: ToyTransformer, batch: MultiTaskBatch, prefix, alpha: ArchParams | None,
               lam: float, adapters: LoraAdapters | None = None, ctx: Context | None = None):
    """mean_i(mean task loss_i) + lam * entropy(alpha).

    Returns ``(loss, task_losses, regularizer)``.  All tasks share one encoder
    pass when their sequence lengths agree.
    """
    ctx = ctx or Context()
    _check_heads(model, batch)
    lens = {tb.tokens.shape[1] for tb in batch.tasks}
    if len(lens) == 1:
        pooled = model.encode(np.concatenate([tb.tokens for tb in batch.tasks]), prefix, adapters, "live", ctx)
        bounds = np.cumsum([0] + batch.sizes)
        pooled_parts = [ad.getitem(pooled, slice(int(a), int(b))) for a, b in zip(bounds[:-1], bounds[1:])]
    else:
        pooled_parts = [model.encode(tb.tokens, prefix, adapters, "live", ctx) for tb in batch.tasks]
    losses = [_task_loss(model.head(p, tb.task_id), tb) for p, tb in zip(pooled_parts, batch.tasks)]
    total = ad.scale(ad.tsum(ad.stack(losses)), 1.0 / len(losses))
    reg = 0.0
    if alpha is not None and lam > 0 and not alpha.discretized:
        r = entropy_regularizer(alpha)
        reg = r.item()
        total = ad.add(total, ad.scale(r, lam))
    elif alpha is not None and not alpha.discretized:
        reg = entropy_regularizer(alpha).item()
    return total, [l.item() for l in losses], reg


# -- steps -----------------------------------------------------------------------------

def _norm(gs) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in gs))


def _prefix(state: TrainState, ctx: Context, step: int, weights=None):
    if state.generator is None:
        return None
    cfg = state.config
    grng = substream(cfg.seed, "gumbel", step) if cfg.strategy == "gumbel" else None
    return generate_prefix(state.generator, state.arch, cfg.strategy, ctx, cfg.temperature, grng, weights)


def _forward_loss(state: TrainState, batch: MultiTaskBatch, step: int):
    if state.dropout_seed is None:
        state.dropout_seed = subseed(state.config.seed, "dropout")
    ctx = Context(True, ad.DropoutStream(state.dropout_seed, step))
    prefix = _prefix(state, ctx, step)
    return joint_loss(state.model, batch, prefix, state.arch, state.config.lam, state.adapters, ctx)


def _alpha_stats(arch: ArchParams | None):
    if arch is None:
        return 0.0, None
    m = np.concatenate([p for p in arch.probabilities()])
    return float(np.var(m)), m


def _apply(state: TrainState, groups, grads_by_group, lr) -> None:
    params, grads, lrs = [], [], []
    for name, ps in groups.items():
        mult = state.config.lr_scale.get(name, 1.0)
        for p, g in zip(ps, grads_by_group[name]):
            params.append(p)
            grads.append(g)
            lrs.append(lr * mult)
    state.optimizer.step(params, grads, lrs)
    if state.arch is not None and state.arch.parameterization == "simplex":
        for r in state.arch.rows:
            r.data = project_simplex(r.data)


def train_step(state: TrainState, batch: MultiTaskBatch, order: str = "simultaneous") -> StepReport:
    """One forward/backward and a simultaneous update of B, A, generator and α.

    ``order="alternating"`` is the two-pass reference: θ first, then α with its
    gradient recomputed at the updated θ.
    """
    cfg = state.config
    step = state.step
    groups = state.groups()
    flat = [p for ps in groups.values() for p in ps]
    try:
        loss, task_losses, reg = _forward_loss(state, batch, step)
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}; task sizes {batch.sizes}") from exc
    grads = ad.grad(loss, flat)
    by_group, i = {}, 0
    for name, ps in groups.items():
        by_group[name] = grads[i:i + len(ps)]
        i += len(ps)
    gnorm = _norm(grads)
    norms = {k: _norm(v) for k, v in by_group.items()}
    if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
        f = cfg.grad_clip / gnorm
        by_group = {k: [g * f for g in v] for k, v in by_group.items()}
    lr = cfg.lr_at(step)

    cross = None
    want_cross = cfg.lipschitz_every and step % cfg.lipschitz_every == 0 and groups["alpha"]
    if order == "alternating":
        theta = {"lora": groups["lora"], "prefix": groups["prefix"]}
        _apply(state, theta, by_group, lr)
        if groups["alpha"]:
            loss2, _, _ = _forward_loss(state, batch, step)
            ga = ad.grad(loss2, groups["alpha"])
            _apply(state, {"alpha": groups["alpha"]}, {"alpha": ga}, lr)
    else:
        if want_cross:
            theta_before = [p.data for p in groups["lora"] + groups["prefix"]]
            alpha_before = [p.data for p in groups["alpha"]]
            raw_alpha = grads[len(grads) - len(groups["alpha"]):]
        _apply(state, groups, by_group, lr)
        if want_cross:
            cross = _cross_lipschitz(state, batch, step, groups, theta_before, alpha_before, raw_alpha)
    if state.arch is not None and cfg.prune_threshold != 0 and not state.arch.discretized:
        _prune(state)
    var, snap = _alpha_stats(state.arch)
    state.step += 1
    return StepReport(step, state.epoch, task_losses, reg, loss.item(), gnorm, norms["lora"],
                      norms["prefix"], norms["alpha"], var, lr, snap, cross)


def _cross_lipschitz(state, batch, step, groups, theta_before, alpha_before,
                     grad_alpha_before) -> float:
    """‖∇_α f(θ_{t+1}, α_t) − ∇_α f(θ_t, α_t)‖ / ‖θ_{t+1} − θ_t‖ on the same batch and noise."""
    theta = groups["lora"] + groups["prefix"]
    dtheta = math.sqrt(sum(float(((p.data - b) ** 2).sum()) for p, b in zip(theta, theta_before)))
    if dtheta == 0:
        return 0.0
    alphas = groups["alpha"]
    alpha_after = [p.data for p in alphas]
    for p, a in zip(alphas, alpha_before):
        p.data = a
    try:
        loss, _, _ = _forward_loss(state, batch, step)
        g_new = ad.grad(loss, alphas)
    finally:
        for p, a in zip(alphas, alpha_after):
            p.data = a
    diff = math.sqrt(sum(float(((x - y) ** 2).sum()) for x, y in zip(g_new, grad_alpha_before)))
    return diff / dtheta


def _prune(state: TrainState) -> None:
    arch = state.arch
    k = state.space.k
    thr = state.config.prune_threshold if state.config.prune_threshold is not None else 0.2 / k
    old = list(arch.rows)
    kept = prune_weak(arch, thr, k)
    for o, n, keep in zip(old, arch.rows, kept):
        if n is not o:
            state.optimizer.remap(o, n, keep)


# -- evaluation ------------------------------------------------------------------------

def eval_weights(arch: ArchParams, strategy: str, temperature: float = 1.0) -> list[np.ndarray]:
    """Deterministic weights used at evaluation time for each strategy."""
    out = []
    for r, p in zip(arch.rows, arch.probabilities()):
        if strategy == "ste":
            w = np.zeros(len(p))
            w[int(np.argmax(r.data))] = 1.0
        elif strategy == "gumbel":
            z = r.data / temperature
            w = np.exp(z - z.max())
            w /= w.sum()
        else:
            w = p
        out.append(w)
    return out


def task_score(logits: np.ndarray, labels: np.ndarray, kind: str) -> float:
    """Accuracy for classification; clipped R² for regression (both in [0, 1])."""
    if kind == "regression":
        pred = logits.reshape(-1)
        var = float(np.var(labels))
        if var == 0:
            return float(np.mean(np.abs(pred - labels) < 1e-6))
        return float(max(0.0, 1.0 - np.mean((pred - labels) ** 2) / var))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: ToyTransformer, coll: TaskCollection, split: str = "val",
             generator: PrefixGenerator | None = None, arch: ArchParams | None = None,
             adapters: LoraAdapters | None = None, strategy: str = "softmax",
             temperature: float = 1.0, weights=None) -> tuple[list[float], float]:
    """Per-task scores and their macro average on one split (eval mode)."""
    with ad.no_grad():
        prefix = None
        if generator is not None:
            if weights is None and not arch.discretized:
                weights = eval_weights(arch, strategy, temperature)
            prefix = generate_prefix(generator, arch, strategy, Context(), temperature, None, weights)
        scores = []
        for i, t in enumerate(coll.tasks):
            sp = t.splits[split]
            logits = model.forward(sp.tokens, i, prefix, adapters)
            scores.append(task_score(logits.data, sp.labels, t.spec.kind))
    return scores, float(np.mean(scores))


def evaluate_loss(state: TrainState, data: MultiTaskBatch, weights) -> float:
    """Eval-mode mean task loss with the given per-layer mixture weights."""
    with ad.no_grad():
        prefix = generate_prefix(state.generator, state.arch, state.config.strategy, Context(),
                                 state.config.temperature, None, weights)
        loss, _, _ = joint_loss(state.model, data, prefix, None, 0.0, state.adapters, Context())
    return loss.item()


# -- loop ----------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ToyTransformer            # merged weights θ + BAᵀ
    generator: PrefixGenerator | None
    arch: ArchParams | None
    history: list[StepReport]
    val_history: list[float]
    final_val: float
    final_scores: list[float]
    relaxed_val: float
    epochs: int
    state: TrainState

    def history_csv(self, task_names: list[str] | None = None) -> str:
        return history_csv(self.history, task_names)


def _run_epoch(state: TrainState, coll: TaskCollection, batch_rng) -> list[StepReport]:
    reports = []
    for _ in range(state.config.epoch_steps):
        batch = build_batch(coll, state.config.gamma, batch_rng)
        if state.config.per_task_updates:
            for tb in batch.tasks:
                reports.append(train_step(state, MultiTaskBatch([tb])))
        else:
            reports.append(train_step(state, batch))
    return reports


def train_loop(config: TrainConfig, coll: TaskCollection, model: ToyTransformer,
               space: SearchSpace | None = None, state: TrainState | None = None) -> TrainResult:
    """Epochs of joint steps with early stopping on macro validation score,
    then discretization and LoRA merge."""
    space = space or SearchSpace()
    kinds = [t.spec.kind for t in coll.tasks]
    state = state or init_state(model, config, space, kinds)
    batch_rng = substream(config.seed, "batch")
    history: list[StepReport] = []
    val_history: list[float] = []
    best, since = -np.inf, 0
    for epoch in range(config.max_epochs):
        state.epoch = epoch
        history += _run_epoch(state, coll, batch_rng)
        _, val = evaluate(model, coll, "val", state.generator, state.arch, state.adapters,
                          config.strategy, config.temperature)
        val_history.append(val)
        if val > best:
            best, since = val, 0
        else:
            since += 1
            if since >= config.patience:
                break
    relaxed = val_history[-1] if val_history else evaluate(
        model, coll, "val", state.generator, state.arch, state.adapters, config.strategy,
        config.temperature)[1]
    if state.arch is not None:
        discretize(state.arch)
    merged = merge_and_export(model, state.adapters, discretized=True)
    scores, final = evaluate(merged, coll, "val", state.generator, state.arch, None)
    return TrainResult(merged, state.generator, state.arch, history, val_history, final, scores,
                       relaxed, len(val_history), state)


# -- diagnostics helpers ---------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    running_mean: np.ndarray   # (1/T) Σ_{t<T} ‖g_t‖² for T = 1..len
    moving_mean: np.ndarray    # trailing-window mean of ‖g_t‖²
    lipschitz: float           # empirical L_θα (nan when never measured)


def convergence_metrics(history: list[StepReport], window: int = 1) -> ConvergenceReport:
    if not history:
        raise ParameterError("history is empty")
    T = len(history)
    if window < 1 or window > T:
        raise ParameterError(f"window={window} must lie in [1, {T}]")
    sq = np.array([h.grad_norm_total ** 2 for h in history])
    running = np.cumsum(sq) / np.arange(1, T + 1)
    kernel = np.ones(window) / window
    moving = np.convolve(sq, kernel, mode="valid")
    cross = [h.cross_lipschitz for h in history if h.cross_lipschitz is not None]
    return ConvergenceReport(running, moving, max(cross) if cross else float("nan"))


def history_csv(history: list[StepReport], task_names: list[str] | None = None) -> str:
    n = len(history[0].task_losses) if history else 0
    names = task_names or [f"task{i}" for i in range(n)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", *[f"loss_{t}" for t in names], "regularizer", "joint_loss",
                "grad_norm_total", "grad_norm_alpha", "alpha_variance", "lr"])
    for h in history:
        w.writerow([h.step, h.epoch, *[repr(x) for x in h.task_losses], repr(h.regularizer),
                    repr(h.joint_loss), repr(h.grad_norm_total), repr(h.grad_norm_alpha),
                    repr(h.alpha_variance), repr(h.lr)])
    return buf.getvalue()


# -- pretraining the frozen base -----------------------------------------------------------------

def pretrain_base(config: ModelConfig, coll: TaskCollection, seed: int, steps: int = 400,
                  lr: float = 3e-3, batch: int = 32) -> ToyTransformer:
    """Train every base weight on ``coll`` (generated with a held-out seed), then freeze."""
    rng = substream(seed, "pretrain")
    base = init_base(config, rng)
    weights = {k: Tensor(v, requires_grad=True) for k, v in base.params.items()}
    names = sorted(weights)
    params = [weights[k] for k in names]
    opt = Adam()
    model = ToyTransformer(config, base)
    kinds = [t.spec.kind for t in coll.tasks]
    for _ in range(steps):
        losses = []
        for i, t in enumerate(coll.tasks):
            sp = t.splits["train"]
            idx = rng.choice(len(sp), size=min(batch, len(sp)), replace=False)
            logits = model.forward(sp.tokens[idx], i, weights=weights)
            losses.append(_task_loss(logits, TaskBatch(i, sp.tokens[idx], sp.labels[idx], kinds[i])))
        loss = ad.scale(ad.tsum(ad.stack(losses)), 1.0 / len(losses))
        opt.step(params, ad.grad(loss, params), [lr] * len(params))
    from .model import BaseWeights
    return ToyTransformer(config, BaseWeights({k: weights[k].data for k in names}))
