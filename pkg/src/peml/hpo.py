"""Outer hyperparameter search: Tree-structured Parzen Estimator over inner training runs.

Each trial trains a fresh generator, fresh architecture parameters and fresh
adapters under the suggested hyperparameters and is scored by the macro
validation accuracy of the discretized, merged result.

Suggestion ``t`` draws from the substream ``(seed, "tpe", t)``.  The startup
trials of a TPE run and a random-search run with the same seed therefore see
identical prior draws, and a resumed run picks up exactly where it stopped.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import TaskCollection
from .errors import ConfigurationError, HpoError, NumericError, PemlError
from .model import ToyTransformer
from .prefixnas import SearchSpace, catalog, export_architecture
from .seeding import substream
from .trainer import TrainConfig, TrainResult, init_state, train_loop

DIMENSIONS = ("lr", "prefix_length", "lam", "k", "n_layers")
STATUSES = ("completed", "pruned", "failed")


@dataclass(frozen=True)
class Dim:
    name: str
    low: float
    high: float
    log: bool = False
    integer: bool = False
    step: float | None = None

    def snap(self, v: float) -> float | int:
        v = min(max(v, self.low), self.high)
        if self.integer:
            return int(min(max(round(v), math.ceil(self.low)), math.floor(self.high)))
        if self.step:
            n = round(v / self.step)
            n = min(max(n, math.ceil(self.low / self.step - 1e-9)), math.floor(self.high / self.step + 1e-9))
            return float(round(n * self.step, 12))
        return float(v)

    def to_internal(self, v: float) -> float:
        return math.log(v) if self.log else float(v)

    def from_internal(self, u: float) -> float:
        return math.exp(u) if self.log else u

    @property
    def bounds(self) -> tuple[float, float]:
        if self.integer:
            # widen by half a unit so every integer gets equal prior mass
            return self.low - 0.5, self.high + 0.5
        return self.to_internal(self.low), self.to_internal(self.high)

    def contains(self, v) -> bool:
        if not (self.low - 1e-12 <= v <= self.high + 1e-12):
            return False
        if self.integer:
            return float(v) == int(v)
        if self.step:
            n = v / self.step
            return abs(n - round(n)) < 1e-6
        return True


@dataclass
class HpoSpace:
    """Ranges for the searched hyperparameters; ``active`` picks the dimensions."""

    lr: tuple[float, float] = (1e-3, 2e-2)
    lr_step: float = 5e-5
    prefix_length: tuple[int, int] = (5, 50)
    lam: tuple[float, float] = (1e-4, 1e-1)
    k: tuple[int, int] = (2, 6)
    n_layers: tuple[int, int] = (1, 6)
    active: tuple[str, ...] = ("lr", "prefix_length", "lam")

    def __post_init__(self):
        self.active = tuple(self.active)
        if not self.active:
            raise ConfigurationError("hpo space has no active dimensions")
        for name in self.active:
            if name not in DIMENSIONS:
                raise ConfigurationError(f"unknown hpo dimension {name!r}; expected one of {DIMENSIONS}")
        for name in DIMENSIONS:
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigurationError(f"hpo.{name}: need low < high, got ({lo}, {hi})")
        for name in ("lr", "lam"):
            if getattr(self, name)[0] <= 0:
                raise ConfigurationError(f"hpo.{name}: log-scaled range must be positive")
        if self.lr_step <= 0:
            raise ConfigurationError("hpo.lr_step must be positive")
        if self.prefix_length[0] < 0 or self.k[0] < 1 or self.n_layers[0] < 1:
            raise ConfigurationError("hpo: integer ranges must start at a valid size")

    def dims(self) -> list[Dim]:
        table = {
            "lr": Dim("lr", *self.lr, log=True, step=self.lr_step),
            "prefix_length": Dim("prefix_length", *self.prefix_length, integer=True),
            "lam": Dim("lam", *self.lam, log=True),
            "k": Dim("k", *self.k, integer=True),
            "n_layers": Dim("n_layers", *self.n_layers, integer=True),
        }
        return [table[n] for n in self.active]

    def sample_prior(self, rng: np.random.Generator) -> dict:
        out = {}
        for d in self.dims():
            lo, hi = d.bounds
            out[d.name] = d.snap(d.from_internal(rng.uniform(lo, hi)))
        return out

    def contains(self, h: dict) -> bool:
        return set(h) == set(self.active) and all(d.contains(h[d.name]) for d in self.dims())


@dataclass
class TpeConfig:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    prior_weight: float = 1.0     # one extra uniform kernel over the range

    def __post_init__(self):
        if self.n_startup < 1 or self.n_candidates < 1 or not 0 < self.gamma < 1:
            raise ConfigurationError("tpe: need n_startup >= 1, n_candidates >= 1, 0 < gamma < 1")
        if self.prior_weight < 0:
            raise ConfigurationError("tpe: prior_weight must be >= 0")


@dataclass
class TpeTrialRecord:
    trial_id: int
    params: dict
    score: float | None
    status: str
    seed: int
    architecture: dict | None = None
    error: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ConfigurationError(f"unknown trial status {self.status!r}")
        if self.status == "completed" and not (self.score is not None and math.isfinite(self.score)):
            raise HpoError(f"trial {self.trial_id}: completed trials need a finite score")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TpeTrialRecord":
        return cls(**json.loads(text))


# -- Parzen estimator ----------------------------------------------------------------

class _Parzen:
    """Gaussian kernels at ``points`` truncated to ``[lo, hi]`` plus a uniform prior kernel.

    The bandwidth is Scott's rule, floored at ``(hi - lo) / min(100, n + 1)`` so
    that repeated points cannot collapse the density onto a single value.
    """

    def __init__(self, points: np.ndarray, lo: float, hi: float, prior_weight: float = 1.0):
        self.mu = np.asarray(points, dtype=np.float64)
        self.lo, self.hi = lo, hi
        n = len(self.mu)
        sd = float(self.mu.std(ddof=1)) if n > 1 else 0.0
        self.sigma = max(sd * n ** (-1 / 5), (hi - lo) / min(100, n + 1))
        a = (lo - self.mu) / self.sigma
        b = (hi - self.mu) / self.sigma
        self.mass = np.maximum(_phi(b) - _phi(a), 1e-300)
        self.w_prior = prior_weight / (n + prior_weight)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(n)
        for i in range(n):
            if rng.random() < self.w_prior:
                out[i] = rng.uniform(self.lo, self.hi)
                continue
            j = rng.integers(len(self.mu))
            while True:
                x = rng.normal(self.mu[j], self.sigma)
                if self.lo <= x <= self.hi:
                    break
            out[i] = x
        return out

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x)[:, None] - self.mu[None, :]) / self.sigma
        k = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self.mass[None, :])
        dens = (1 - self.w_prior) * k.mean(axis=1) + self.w_prior / (self.hi - self.lo)
        return np.log(np.maximum(dens, 1e-300))


def _phi(z):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(z, dtype=np.float64) / math.sqrt(2.0)))


def _completed(history: list[TpeTrialRecord]) -> list[TpeTrialRecord]:
    return [r for r in history if r.status == "completed"]


def tpe_suggest(history: list[TpeTrialRecord], space: HpoSpace, rng: np.random.Generator,
                config: TpeConfig | None = None) -> dict:
    """Next hyperparameter point: prior draw during startup, else argmax l/g of candidates."""
    config = config or TpeConfig()
    done = _completed(history)
    if len(done) < config.n_startup:
        return space.sample_prior(rng)
    ranked = sorted(done, key=lambda r: (-r.score, r.trial_id))
    n_good = max(1, math.ceil(config.gamma * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:] or ranked[-1:]
    dims = space.dims()
    cand = np.zeros((config.n_candidates, len(dims)))
    score = np.zeros(config.n_candidates)
    for j, d in enumerate(dims):
        lo, hi = d.bounds
        l = _Parzen(np.array([d.to_internal(r.params[d.name]) for r in good]), lo, hi, config.prior_weight)
        g = _Parzen(np.array([d.to_internal(r.params[d.name]) for r in bad]), lo, hi, config.prior_weight)
        raw = l.sample(rng, config.n_candidates)
        snapped = np.array([d.to_internal(d.snap(d.from_internal(u))) for u in raw])
        cand[:, j] = snapped
        score += l.logpdf(snapped) - g.logpdf(snapped)
    best = int(np.argmax(score))
    return {d.name: d.snap(d.from_internal(cand[best, j])) for j, d in enumerate(dims)}


def random_suggest(history: list[TpeTrialRecord], space: HpoSpace, rng: np.random.Generator,
                   config: TpeConfig | None = None) -> dict:
    return space.sample_prior(rng)


SAMPLERS: dict[str, Callable] = {"tpe": tpe_suggest, "random": random_suggest}


# -- trials ----------------------------------------------------------------------------

def trial_config(h: dict, template: TrainConfig, budget: int, seed: int) -> TrainConfig:
    kw = {"max_epochs": budget, "seed": seed}
    if "lr" in h:
        kw["lr"] = float(h["lr"])
    if "lam" in h:
        kw["lam"] = float(h["lam"])
    if "prefix_length" in h:
        kw["prefix_length"] = int(h["prefix_length"])
    return replace(template, **kw)


def trial_space(h: dict, base: SearchSpace) -> SearchSpace:
    k = int(h.get("k", base.k))
    ops = base.catalog if k == base.k else catalog(k)
    return SearchSpace(int(h.get("n_layers", base.n_layers)), ops)


def _warm_state(model: ToyTransformer, cfg: TrainConfig, space: SearchSpace, coll: TaskCollection,
                architecture: dict | None):
    """Fresh state whose α starts at an earlier trial's probabilities when the shapes agree."""
    state = init_state(model, cfg, space, [t.spec.kind for t in coll.tasks])
    if architecture is None or state.arch is None:
        return state
    probs = [np.asarray(layer["probabilities"], dtype=np.float64) for layer in architecture["layers"]]
    if len(probs) != space.n_layers or any(len(p) != space.k for p in probs):
        return state
    for row, p in zip(state.arch.rows, probs):
        if state.arch.parameterization == "softmax":
            row.data = np.log(np.maximum(p, 1e-12))
        else:
            row.data = p.copy()
    return state


def evaluate_trial(h: dict, coll: TaskCollection, model: ToyTransformer, budget: int, seed: int,
                   template: TrainConfig | None = None, space: SearchSpace | None = None,
                   trial_id: int = 0, warm_from: dict | None = None) -> tuple[TpeTrialRecord, TrainResult | None]:
    """Run the inner loop under ``h`` for at most ``budget`` epochs and score it.

    ``warm_from`` is an exported architecture whose probabilities initialize α.
    Numeric or configuration failures inside the inner loop give a ``failed``
    record instead of raising.
    """
    template = template or TrainConfig()
    space = space or SearchSpace()
    try:
        cfg = trial_config(h, template, budget, seed)
        inner = trial_space(h, space)
        state = _warm_state(model, cfg, inner, coll, warm_from) if warm_from is not None else None
        result = train_loop(cfg, coll, model, inner, state)
    except (NumericError, PemlError, ValueError, ArithmeticError) as exc:
        return TpeTrialRecord(trial_id, dict(h), None, "failed", seed, None, str(exc)), None
    score = float(result.final_val)
    if not math.isfinite(score):
        return TpeTrialRecord(trial_id, dict(h), None, "failed", seed, None, "non-finite score"), None
    arch = export_architecture(result.generator, result.arch) if result.arch is not None else None
    return TpeTrialRecord(trial_id, dict(h), score, "completed", seed, arch), result


# -- outer loop --------------------------------------------------------------------------

@dataclass
class HpoResult:
    best: TpeTrialRecord
    records: list[TpeTrialRecord]
    best_result: TrainResult | None = None
    leaderboard: list[TpeTrialRecord] = field(default_factory=list)


def leaderboard(records: list[TpeTrialRecord]) -> list[TpeTrialRecord]:
    """Completed trials by non-increasing score, ties broken by trial id."""
    return sorted(_completed(records), key=lambda r: (-r.score, r.trial_id))


def leaderboard_csv(records: list[TpeTrialRecord], space: HpoSpace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(space.active)
    w.writerow(["rank", "trial_id", "score", *names])
    for rank, r in enumerate(leaderboard(records), start=1):
        w.writerow([rank, r.trial_id, repr(r.score), *[r.params.get(n) for n in names]])
    return buf.getvalue()


def load_store(path) -> list[TpeTrialRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(TpeTrialRecord.from_json(line))
        except (json.JSONDecodeError, TypeError) as exc:
            raise HpoError(f"{path}: line {lineno}: bad trial record ({exc})") from None
    return out


def hpo_run(space: HpoSpace, coll: TaskCollection, model: ToyTransformer, n_trials: int,
            seed: int = 0, budget: int = 30, template: TrainConfig | None = None,
            search_space: SearchSpace | None = None, sampler: str = "tpe",
            tpe: TpeConfig | None = None, store=None,
            evaluate: Callable | None = None, warm_start: bool = False) -> HpoResult:
    """Sequential suggest/evaluate rounds, appending each record to ``store``.

    Records already in ``store`` are reused, so an interrupted run resumes.
    ``evaluate(h, trial_id)`` replaces the inner training run when given and
    must return a record (and optionally a result).  With ``warm_start`` each
    trial starts α from the best completed trial so far instead of uniform.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    if sampler not in SAMPLERS:
        raise ConfigurationError(f"unknown sampler {sampler!r}; expected one of {tuple(SAMPLERS)}")
    suggest = SAMPLERS[sampler]
    records = load_store(store) if store is not None else []
    records = records[:n_trials]
    best_result: TrainResult | None = None
    best_score = max((r.score for r in _completed(records)), default=-math.inf)
    for t in range(len(records), n_trials):
        h = suggest(records, space, substream(seed, "tpe", t), tpe)
        if evaluate is not None:
            out = evaluate(h, t)
            rec, res = out if isinstance(out, tuple) else (out, None)
        else:
            board = leaderboard(records) if warm_start else []
            warm = board[0].architecture if board else None
            rec, res = evaluate_trial(h, coll, model, budget, seed, template, search_space, t, warm)
        records.append(rec)
        if store is not None:
            with open(store, "a") as fh:
                fh.write(rec.to_json() + "\n")
        if rec.status == "completed" and rec.score > best_score:
            best_score, best_result = rec.score, res
    board = leaderboard(records)
    if not board:
        raise HpoError(f"all {len(records)} trials failed")
    best = board[0]
    if best_result is not None and best_score != best.score:
        best_result = None
    return HpoResult(best, records, best_result, board)


def calibration_objective(h: dict, optimum: float = 5e-3, width: float = 0.5) -> float:
    """Smooth 1-D score in [0, 1] peaking at ``lr == optimum`` (log scale)."""
    z = (math.log(h["lr"]) - math.log(optimum)) / width
    return math.exp(-0.5 * z * z)
