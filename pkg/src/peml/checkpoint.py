"""JSON checkpoints for frozen bases and trained adapters/generators.

Floats are written with ``repr`` precision through :mod:`json`, so a reload is
exact and a rerun with the same seed writes byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ParseError, StateError
from .model import (BaseWeights, LoraAdapter, LoraAdapters, ModelConfig, ToyTransformer,
                    merge_and_export)
from .prefixnas import ArchParams, PrefixGenerator
from .trainer import TrainConfig

FORMAT_VERSION = 1


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def _read(path, kind: str) -> dict:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise StateError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from None
    if not isinstance(obj, dict) or obj.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported or missing format_version", field="format_version")
    if obj.get("kind") != kind:
        raise ParseError(f"{path}: expected a {kind!r} file, found {obj.get('kind')!r}", field="kind")
    return obj


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["lora_targets"] = tuple(d.get("lora_targets", ()))
    return ModelConfig(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})


# -- base -----------------------------------------------------------------------

def save_base(model: ToyTransformer, path) -> None:
    _dump({"format_version": FORMAT_VERSION, "kind": "base",
           "model_config": asdict(model.config), "checksum": model.base.checksum(),
           "params": {k: v.tolist() for k, v in sorted(model.base.params.items())}}, path)


def load_base(path) -> ToyTransformer:
    obj = _read(path, "base")
    config = model_config_from_dict(obj["model_config"])
    base = BaseWeights({k: np.asarray(v, dtype=np.float64) for k, v in obj["params"].items()})
    if base.checksum() != obj["checksum"]:
        raise StateError(f"{path}: base weights do not match their recorded checksum")
    return ToyTransformer(config, base)


# -- trained components ---------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    base_checksum: str
    adapters: LoraAdapters | None
    generator: PrefixGenerator | None
    arch: ArchParams | None
    metrics: dict

    def merged_model(self, base: ToyTransformer) -> ToyTransformer:
        """Frozen base plus the stored adapter deltas, after a checksum check."""
        if base.base.checksum() != self.base_checksum:
            raise StateError("checkpoint was trained on a different base (checksum mismatch)")
        return merge_and_export(base, self.adapters, discretized=True)


def _adapters_state(adapters: LoraAdapters | None):
    if adapters is None:
        return None
    return [{"block": a.block, "target": a.target, "B": a.B.data.tolist(), "A": a.A.data.tolist(),
             "scale": a.scale, "dropout_p": a.dropout_p}
            for _, a in sorted(adapters.items.items())]


def _adapters_from_state(state) -> LoraAdapters | None:
    if state is None:
        return None
    return LoraAdapters([LoraAdapter(s["block"], s["target"],
                                     Tensor(np.asarray(s["B"], dtype=np.float64), requires_grad=True),
                                     Tensor(np.asarray(s["A"], dtype=np.float64), requires_grad=True),
                                     float(s["scale"]), float(s["dropout_p"])) for s in state])


def save_checkpoint(path, model_config: ModelConfig, train_config: TrainConfig, base_checksum: str,
                    adapters: LoraAdapters | None, generator: PrefixGenerator | None,
                    arch: ArchParams | None, metrics: dict | None = None) -> None:
    _dump({"format_version": FORMAT_VERSION, "kind": "checkpoint",
           "model_config": asdict(model_config), "train_config": asdict(train_config),
           "base_checksum": base_checksum, "adapters": _adapters_state(adapters),
           "generator": generator.state() if generator is not None else None,
           "arch": arch.state() if arch is not None else None,
           "metrics": metrics or {}}, path)


def save_result(path, result, train_config: TrainConfig, base: ToyTransformer) -> None:
    """Checkpoint a :class:`~peml.trainer.TrainResult` trained on ``base``."""
    save_checkpoint(path, base.config, train_config, base.base.checksum(), result.state.adapters,
                    result.generator, result.arch,
                    {"final_val": result.final_val, "final_scores": list(result.final_scores),
                     "relaxed_val": result.relaxed_val, "epochs": result.epochs})


def load_checkpoint(path) -> Checkpoint:
    obj = _read(path, "checkpoint")
    try:
        return Checkpoint(model_config_from_dict(obj["model_config"]),
                          train_config_from_dict(obj["train_config"]), obj["base_checksum"],
                          _adapters_from_state(obj["adapters"]),
                          PrefixGenerator.from_state(obj["generator"]) if obj["generator"] else None,
                          ArchParams.from_state(obj["arch"]) if obj["arch"] else None,
                          obj.get("metrics", {}))
    except KeyError as exc:
        raise ParseError(f"{path}: missing checkpoint field", field=str(exc.args[0])) from None
