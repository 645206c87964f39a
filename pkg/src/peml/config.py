"""Run configuration: one TOML file, environment overrides, then flag overrides.

Schema (every key optional; unknown sections or keys are rejected)::

    [run]     seed, output_dir
    [data]    path, families, n_train, n_val, n_test, vocab_size, seq_len, world
    [base]    path, pretrain_seed, pretrain_steps
    [model]   ModelConfig fields except vocab_size / max_seq / n_classes (taken from [data])
    [train]   TrainConfig fields except seed (taken from [run])
    [search]  n_layers, k
    [hpo]     n_trials, budget, sampler, active, lr, lr_step, prefix_length, lam,
              n_startup, gamma, n_candidates, prior_weight, warm_start

``PEML_OUTPUT_DIR`` and ``PEML_SEED`` override the file; ``--set section.key=value``
flags override both.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import FAMILIES, TaskSpec
from .errors import ConfigurationError
from .hpo import HpoSpace, TpeConfig
from .model import ModelConfig
from .prefixnas import SearchSpace, catalog
from .trainer import TrainConfig

ENV_OUTPUT_DIR = "PEML_OUTPUT_DIR"
ENV_SEED = "PEML_SEED"


@dataclass
class DataConfig:
    path: str = "data/suite.jsonl"
    families: tuple = FAMILIES
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    vocab_size: int = 64
    seq_len: int = 16
    world: int = 0

    def __post_init__(self):
        self.families = tuple(self.families)
        if not self.families:
            raise ConfigurationError("data.families must not be empty")
        self.specs()

    def specs(self, instructed: bool = False) -> list[TaskSpec]:
        return [TaskSpec(f"t{i}_{fam}", fam, seed=i, vocab_size=self.vocab_size, seq_len=self.seq_len,
                         n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                         instructed=instructed and fam == "pattern")
                for i, fam in enumerate(self.families)]


@dataclass
class BaseConfig:
    path: str = ""              # empty: pretrain a base and save it in the output directory
    pretrain_seed: int = 999
    pretrain_steps: int = 600


@dataclass
class SearchConfig:
    n_layers: int = 6
    k: int = 6

    def __post_init__(self):
        self.space()

    def space(self) -> SearchSpace:
        return SearchSpace(self.n_layers, catalog(self.k))


@dataclass
class HpoConfig:
    n_trials: int = 20
    budget: int = 30
    sampler: str = "tpe"
    active: tuple = ("lr", "prefix_length", "lam")
    lr: tuple = (1e-3, 2e-2)
    lr_step: float = 5e-5
    prefix_length: tuple = (5, 50)
    lam: tuple = (1e-4, 1e-1)
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    prior_weight: float = 1.0
    warm_start: bool = False

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigurationError("hpo.n_trials must be >= 1")
        if self.budget < 0:
            raise ConfigurationError("hpo.budget must be >= 0")
        if self.sampler not in ("tpe", "random"):
            raise ConfigurationError(f"hpo.sampler must be 'tpe' or 'random', got {self.sampler!r}")
        self.space()
        self.tpe()

    def space(self) -> HpoSpace:
        return HpoSpace(lr=tuple(self.lr), lr_step=self.lr_step, prefix_length=tuple(self.prefix_length),
                        lam=tuple(self.lam), active=tuple(self.active))

    def tpe(self) -> TpeConfig:
        return TpeConfig(self.n_startup, self.gamma, self.n_candidates, self.prior_weight)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    hpo: HpoConfig = field(default_factory=HpoConfig)

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


SECTIONS = {"data": DataConfig, "base": BaseConfig, "model": ModelConfig, "train": TrainConfig,
            "search": SearchConfig, "hpo": HpoConfig}
DERIVED = {"model": ("vocab_size", "max_seq", "n_classes"), "train": ("seed",)}
RUN_KEYS = {"seed": int, "output_dir": str}


def _coerce(where: str, value, default):
    def bad(expected):
        return ConfigurationError(f"{where}: expected {expected}, got {value!r}")

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if isinstance(default, int) and default is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise bad("a list")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise bad("a table")
        return dict(value)
    return value


def _section(name: str, cls, table: dict):
    if not isinstance(table, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    defaults = cls()
    allowed = {f.name for f in fields(cls)} - set(DERIVED.get(name, ()))
    kw = {}
    for key, value in table.items():
        if key not in allowed:
            raise ConfigurationError(f"unknown key {name}.{key}")
        kw[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    return kw


def build(raw: dict) -> RunConfig:
    """Validate a parsed config mapping into a :class:`RunConfig`."""
    for key in raw:
        if key != "run" and key not in SECTIONS:
            raise ConfigurationError(f"unknown section [{key}]")
    run = raw.get("run", {})
    if not isinstance(run, dict):
        raise ConfigurationError("[run] must be a table")
    run_kw = {}
    for key, value in run.items():
        if key not in RUN_KEYS:
            raise ConfigurationError(f"unknown key run.{key}")
        run_kw[key] = _coerce(f"run.{key}", value, RUN_KEYS[key]())
    parts = {}
    for name, cls in SECTIONS.items():
        kw = _section(name, cls, raw.get(name, {}))
        if name == "model":
            data = parts["data"]
            kw.update(vocab_size=data.vocab_size, max_seq=data.seq_len, n_classes=[2] * len(data.families))
        try:
            parts[name] = cls(**kw)
        except ConfigurationError as exc:
            raise ConfigurationError(f"[{name}] {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"[{name}] invalid value: {exc}") from None
    return RunConfig(**run_kw, **parts)


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with a TOML value; bare words become strings."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form section.key=value")
    path, value = text.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) != 2 or not all(keys):
        raise ConfigurationError(f"override key {path!r} must be section.key")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return keys, parsed


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{p}: {exc}") from None
    run = raw.setdefault("run", {})
    if env.get(ENV_OUTPUT_DIR):
        run["output_dir"] = env[ENV_OUTPUT_DIR]
    if env.get(ENV_SEED):
        try:
            run["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigurationError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}") from None
    for text in overrides:
        (section, key), value = parse_override(text)
        table = raw.setdefault(section, {})
        if not isinstance(table, dict):
            raise ConfigurationError(f"[{section}] must be a table")
        table[key] = value
    return build(raw)


def dump_toml(config: RunConfig) -> str:
    """The config as TOML text (derived keys omitted)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{ " + ", ".join(f"{k} = {fmt(x)}" for k, x in v.items()) + " }"
        return repr(v)

    lines = ["[run]", f"seed = {config.seed}", f"output_dir = {fmt(config.output_dir)}"]
    for name in SECTIONS:
        obj = getattr(config, name)
        lines += ["", f"[{name}]"]
        for f in fields(obj):
            if f.name in DERIVED.get(name, ()):
                continue
            v = getattr(obj, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {fmt(v)}")
    return "\n".join(lines) + "\n"
