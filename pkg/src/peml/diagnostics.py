"""Desk-scale analysis: relaxation stability, parameter overhead, switching latency, sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import TaskCollection
from .errors import ConfigurationError, ParameterError
from .model import LoraAdapters, ToyTransformer
from .prefixnas import PrefixGenerator, SearchSpace, catalog, discretization_gap
from .trainer import (MultiTaskBatch, TaskBatch, TrainConfig, convergence_metrics, evaluate_loss,
                      train_loop)


# -- relaxation comparison -----------------------------------------------------------

@dataclass
class StrategyRun:
    strategy: str
    seed: int
    grad_norms: list[float]
    alpha_variance: float
    final_val: float
    relaxed_val: float
    loss_gap: float
    l1_gap: list[float]

    @property
    def grad_norm_mean(self) -> float:
        return float(np.mean(self.grad_norms)) if self.grad_norms else 0.0

    @property
    def grad_norm_std(self) -> float:
        return float(np.std(self.grad_norms)) if self.grad_norms else 0.0

    @property
    def grad_norm_var(self) -> float:
        return float(np.var(self.grad_norms)) if self.grad_norms else 0.0


@dataclass
class RelaxationReport:
    strategies: list[str]
    seeds: list[int]
    runs: dict[str, list[StrategyRun]]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for s in self.strategies:
            rs = self.runs[s]
            col = lambda f: np.array([f(r) for r in rs])
            means = col(lambda r: r.grad_norm_mean)
            out[s] = {
                "grad_norm_mean": float(means.mean()),
                "grad_norm_std": float(col(lambda r: r.grad_norm_std).mean()),
                "grad_norm_var": float(col(lambda r: r.grad_norm_var).mean()),
                "alpha_variance": float(col(lambda r: r.alpha_variance).mean()),
                "alpha_variance_std": float(col(lambda r: r.alpha_variance).std()),
                "final_val": float(col(lambda r: r.final_val).mean()),
                "final_val_std": float(col(lambda r: r.final_val).std()),
                "loss_gap": float(col(lambda r: r.loss_gap).mean()),
                "loss_gap_std": float(col(lambda r: r.loss_gap).std()),
            }
        return out

    def wins(self, a: str, b: str, metric: str) -> int:
        """Seeds where strategy ``a`` has metric <= strategy ``b``."""
        get = {"grad_norm_var": lambda r: r.grad_norm_var, "loss_gap": lambda r: r.loss_gap,
               "alpha_variance": lambda r: r.alpha_variance}[metric]
        return sum(get(x) <= get(y) for x, y in zip(self.runs[a], self.runs[b]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "seed", "grad_norm_mean", "grad_norm_std", "grad_norm_var",
                    "alpha_variance", "final_val", "relaxed_val", "loss_gap"])
        for s in self.strategies:
            for r in self.runs[s]:
                w.writerow([s, r.seed, repr(r.grad_norm_mean), repr(r.grad_norm_std),
                            repr(r.grad_norm_var), repr(r.alpha_variance), repr(r.final_val),
                            repr(r.relaxed_val), repr(r.loss_gap)])
        return buf.getvalue()

    def series_csv(self) -> str:
        """Per-step α-gradient norms, one column per (strategy, seed)."""
        cols = [(s, r) for s in self.strategies for r in self.runs[s]]
        n = max((len(r.grad_norms) for _, r in cols), default=0)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *[f"{s}_seed{r.seed}" for s, r in cols]])
        for t in range(n):
            w.writerow([t, *[repr(r.grad_norms[t]) if t < len(r.grad_norms) else "" for _, r in cols]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"strategies": self.strategies, "seeds": self.seeds,
                           "summary": self.summary()}, indent=2, sort_keys=True)


def split_batch(coll: TaskCollection, split: str = "val") -> MultiTaskBatch:
    return MultiTaskBatch([TaskBatch(i, t.splits[split].tokens, t.splits[split].labels, t.spec.kind)
                           for i, t in enumerate(coll.tasks)])


def alpha_temporal_variance(snapshots: list[np.ndarray]) -> float:
    """Per-coordinate variance of α over steps, averaged over coordinates."""
    if not snapshots:
        return 0.0
    return float(np.var(np.stack(snapshots), axis=0).mean())


def relaxation_comparison(config: TrainConfig, coll: TaskCollection, model: ToyTransformer,
                          space: SearchSpace | None = None,
                          strategies=("softmax", "gumbel", "ste"), seeds=range(5)) -> RelaxationReport:
    """Matched runs (same data order and init per seed) for each strategy.

    Pruning is switched off so α keeps the same coordinates for the whole run.
    The loss gap is measured on the validation split as
    |loss(softmax(α) mixture) - loss(argmax one-hot)| for every strategy.
    """
    strategies, seeds = list(strategies), list(seeds)
    if len(strategies) < 2:
        raise ParameterError("need at least two strategies")
    if len(seeds) < 5:
        raise ParameterError("need at least five seeds")
    if config.mode != "peml" and config.mode != "prefix-only":
        raise ConfigurationError("relaxation comparison needs a prefix generator")
    space = space or SearchSpace()
    data = split_batch(coll)
    runs: dict[str, list[StrategyRun]] = {s: [] for s in strategies}
    for s in strategies:
        for seed in seeds:
            cfg = replace(config, strategy=s, seed=seed, prune_threshold=0,
                          parameterization="softmax")
            res = train_loop(cfg, coll, model, space)
            arch = res.arch
            l1, gap = discretization_gap(lambda w: evaluate_loss(res.state, data, w), arch)
            snaps = [h.alpha_snapshot for h in res.history if h.alpha_snapshot is not None]
            runs[s].append(StrategyRun(s, seed, [h.grad_norm_alpha for h in res.history],
                                       alpha_temporal_variance(snaps), res.final_val,
                                       res.relaxed_val, gap, l1))
    return RelaxationReport(strategies, seeds, runs)


# -- parameter overhead ------------------------------------------------------------------

@dataclass
class OverheadReport:
    base: int
    lora: int
    prefix: int
    ratio: float
    ratio_exact: Fraction = field(repr=False, default=Fraction(0))

    def to_json(self) -> str:
        d = asdict(self)
        d["ratio_exact"] = str(self.ratio_exact)
        return json.dumps(d, indent=2, sort_keys=True)


def param_overhead(model: ToyTransformer, adapters: LoraAdapters | None = None,
                   generator: PrefixGenerator | None = None, arch=None) -> OverheadReport:
    """Exact counts; the ratio is (lora + prefix) / base."""
    base = model.base.count()
    lora = adapters.count() if adapters is not None else 0
    prefix = generator.count(arch) if generator is not None else 0
    exact = Fraction(lora + prefix, base)
    return OverheadReport(base, lora, prefix, float(exact), exact)


# -- switching latency ------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    multi_adapter_ms: float
    unified_ms: float
    reduction_pct: float


def switching_latency_model(t_f: float, t_s: float, n_tasks: int) -> LatencyReport:
    """T = n (t_f + t_s) with one adapter per task versus T = n t_f with a unified one."""
    if not t_f > 0 or t_s < 0 or n_tasks < 1 or int(n_tasks) != n_tasks:
        raise ParameterError("need t_f > 0, t_s >= 0 and an integer n_tasks >= 1")
    # decimal inputs such as 2.1 are not exact in binary; round at 1e-9 ms
    multi = round(n_tasks * (t_f + t_s), 9)
    unified = round(n_tasks * t_f, 9)
    return LatencyReport(multi, unified, 100.0 * (multi - unified) / multi)


# -- sensitivity sweep ---------------------------------------------------------------------

@dataclass
class SweepPoint:
    n_layers: int
    block_repetition: int
    prefix_length: int
    seed: int
    score: float


@dataclass
class SweepResult:
    points: list[SweepPoint]

    def mean_scores(self) -> dict[tuple[int, int, int], float]:
        acc: dict[tuple, list[float]] = {}
        for p in self.points:
            acc.setdefault((p.n_layers, p.block_repetition, p.prefix_length), []).append(p.score)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    @property
    def best(self) -> tuple[int, int, int]:
        means = self.mean_scores()
        return max(means, key=lambda k: (means[k], [-x for x in k]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_layers", "block_repetition", "prefix_length", "seed", "score"])
        for p in self.points:
            w.writerow([p.n_layers, p.block_repetition, p.prefix_length, p.seed, repr(p.score)])
        return buf.getvalue()


def sensitivity_sweep(config: TrainConfig, coll: TaskCollection, model: ToyTransformer,
                      n_layers=(6,), block_repetition=(1,), prefix_length=None,
                      k: int | None = None, seeds=(0,)) -> SweepResult:
    """Train one model per grid point and seed; score is the final macro validation accuracy.

    ``block_repetition`` repeats the searched cell: the generator gets
    ``n_layers * block_repetition`` mixed layers.
    """
    prefix_length = tuple(prefix_length or (config.prefix_length,))
    grids = {"n_layers": n_layers, "block_repetition": block_repetition, "prefix_length": prefix_length}
    for name, g in grids.items():
        if not len(g):
            raise ParameterError(f"sweep grid {name} is empty")
    ops = catalog(k) if k else catalog(len(SearchSpace().catalog))
    points = []
    for L in n_layers:
        for rep in block_repetition:
            for pl in prefix_length:
                for seed in seeds:
                    cfg = replace(config, prefix_length=int(pl), seed=int(seed))
                    res = train_loop(cfg, coll, model, SearchSpace(int(L) * int(rep), ops))
                    points.append(SweepPoint(int(L), int(rep), int(pl), int(seed), res.final_val))
    return SweepResult(points)


# -- convergence ------------------------------------------------------------------------------

def convergence_report(history, checkpoints=(500, 2000)) -> dict:
    """Running mean of ‖g‖² at the requested step counts plus the cross-Lipschitz estimate."""
    rep = convergence_metrics(history)
    n = len(rep.running_mean)
    out = {f"running_mean_sq_grad_T{t}": float(rep.running_mean[t - 1]) for t in checkpoints if t <= n}
    out["steps"] = n
    out["lipschitz_theta_alpha"] = None if math.isnan(rep.lipschitz) else rep.lipschitz
    return out


def write_report(out_dir, name: str, payload: str) -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload)
    return path
