"""Named desk-scale setups shared by the scripts and the statistical tests.

Each preset fixes a target suite, a pretraining suite generated from a
held-out seed, the model shape and the training recipe.  Pretrained bases are
cached per process because pretraining is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import TaskCollection, TaskSpec, default_specs, generate_tasks, pretraining_specs
from .hpo import HpoSpace, TpeTrialRecord, evaluate_trial, hpo_run
from .model import ModelConfig, ToyTransformer
from .prefixnas import SearchSpace, catalog
from .trainer import TrainConfig, TrainResult, evaluate, pretrain_base, train_loop

PRETRAIN_SEED = 999


@dataclass(frozen=True)
class Preset:
    name: str
    model: ModelConfig
    target: tuple[TaskSpec, ...]
    pretrain: tuple[TaskSpec, ...]
    train: TrainConfig
    n_layers: int = 2
    k: int = 4
    pretrain_steps: int = 600

    @property
    def space(self) -> SearchSpace:
        return SearchSpace(self.n_layers, catalog(self.k))

    def collection(self, seed: int) -> TaskCollection:
        return generate_tasks(list(self.target), seed)

    def config(self, **kw) -> TrainConfig:
        return replace(self.train, **kw)


def _pair(instructed: bool, vocab: int, seq: int, n_train: int, n_val: int, n_test: int):
    c = dict(vocab_size=vocab, seq_len=seq, n_train=n_train, n_val=n_val, n_test=n_test)
    return (TaskSpec("pattern", "pattern", seed=0, instructed=instructed, **c),
            TaskSpec("aggregate", "aggregate", seed=2, **c))


def benefit_preset() -> Preset:
    """Plain pattern (prefix-sensitive) plus aggregate (weight-sensitive), vocab 16."""
    model = ModelConfig(d_model=16, n_heads=2, n_blocks=1, vocab_size=16, max_seq=8, d_ff=32,
                        n_classes=[2, 2], lora_rank=4, lora_alpha=8)
    return Preset("benefit", model, _pair(False, 16, 8, 600, 200, 50), _pair(True, 16, 8, 400, 100, 50),
                  TrainConfig(lr=1e-2, gamma=0.1, max_epochs=40, patience=40, prefix_length=4))


def suite_preset() -> Preset:
    """The four-family suite at vocab 16 / length 8 on a one-block model."""
    model = ModelConfig(d_model=16, n_heads=2, n_blocks=1, vocab_size=16, max_seq=8, d_ff=32,
                        n_classes=[2, 2, 2, 2], lora_rank=4, lora_alpha=8)
    target = default_specs(n_train=200, n_val=100, n_test=50, vocab_size=16, seq_len=8)
    pre = pretraining_specs(n_train=400, n_val=100, n_test=50, vocab_size=16, seq_len=8)
    return Preset("suite", model, tuple(target), tuple(pre),
                  TrainConfig(lr=1e-2, gamma=0.05, max_epochs=20, patience=20, prefix_length=4))


PRESETS = {"benefit": benefit_preset, "suite": suite_preset}
_BASES: dict = {}


def pretrained(preset: Preset) -> ToyTransformer:
    key = (repr(preset.model), preset.pretrain, preset.pretrain_steps)
    if key not in _BASES:
        coll = generate_tasks(list(preset.pretrain), PRETRAIN_SEED)
        _BASES[key] = pretrain_base(preset.model, coll, PRETRAIN_SEED, steps=preset.pretrain_steps)
    return _BASES[key]


# -- joint-method benefit ---------------------------------------------------------------

@dataclass
class BenefitRun:
    seed: int
    scores: dict[str, list[float]]      # per mode, per task
    macro: dict[str, float]

    def beats(self, mode: str) -> bool:
        return self.macro["peml"] >= self.macro[mode]


def benefit_run(seed: int, preset: Preset | None = None, modes=("peml", "lora-only", "prefix-only")) -> BenefitRun:
    preset = preset or benefit_preset()
    model = pretrained(preset)
    coll = preset.collection(seed)
    scores, macro = {}, {}
    for mode in modes:
        res = train_loop(preset.config(seed=seed, mode=mode), coll, model, preset.space)
        scores[mode] = list(res.final_scores)
        macro[mode] = res.final_val
    return BenefitRun(seed, scores, macro)


# -- convergence ----------------------------------------------------------------------------

def convergence_run(seed: int, steps: int = 2000, c: float = 1.0, preset: Preset | None = None,
                    lipschitz_every: int = 100) -> TrainResult:
    """``steps`` SGD updates with η = c / √steps as one long epoch (no early stopping)."""
    preset = preset or suite_preset()
    model = pretrained(preset)
    coll = preset.collection(seed)
    cfg = preset.config(seed=seed, lr=c, schedule="inv_sqrt", total_steps=steps, optimizer="sgd",
                        steps_per_epoch=steps, max_epochs=1, patience=1,
                        lipschitz_every=lipschitz_every)
    return train_loop(cfg, coll, model, preset.space)


def base_scores(preset: Preset, seed: int) -> list[float]:
    return evaluate(pretrained(preset), preset.collection(seed), "val")[0]


# -- TPE versus random search ------------------------------------------------------------------

@dataclass
class HpoPair:
    rep: int
    tpe: list[float]        # per-trial scores in order
    random: list[float]

    @property
    def tpe_best(self) -> float:
        return max(self.tpe)

    @property
    def random_best(self) -> float:
        return max(self.random)


def hpo_pair(rep: int, n_trials: int = 20, budget: int = 3, preset: Preset | None = None) -> HpoPair:
    """TPE and random search from the same seed on the benefit suite.

    Both samplers draw their startup trials from the same substreams, so those
    evaluations are computed once and shared.
    """
    preset = preset or benefit_preset()
    model = pretrained(preset)
    coll = preset.collection(rep)
    space = HpoSpace()
    template = preset.config()
    cache: dict = {}

    def evaluate(h, t):
        key = tuple(sorted(h.items()))
        if key not in cache:
            cache[key] = evaluate_trial(h, coll, model, budget, rep, template, preset.space, t)[0]
        rec = cache[key]
        return TpeTrialRecord(t, dict(h), rec.score, rec.status, rec.seed, rec.architecture, rec.error)

    out = {}
    for sampler in ("tpe", "random"):
        res = hpo_run(space, coll, model, n_trials, seed=rep, sampler=sampler, evaluate=evaluate)
        out[sampler] = [r.score if r.status == "completed" else float("nan") for r in res.records]
    return HpoPair(rep, out["tpe"], out["random"])
