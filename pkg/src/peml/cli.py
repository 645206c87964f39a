"""``peml`` command line: data generation, training, search, HPO, diagnostics.

Exit codes: 0 success, 1 configuration/usage/data error, 2 refusal to
overwrite an existing file, 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import diagnostics as diag
from .checkpoint import load_base, load_checkpoint, save_base, save_result
from .config import RunConfig, dump_toml, load_config
from .data import TaskCollection, generate_tasks, load_collection, save_collection
from .errors import NumericError, PemlError
from .hpo import evaluate_trial, hpo_run, leaderboard, leaderboard_csv, trial_config
from .model import ToyTransformer
from .prefixnas import save_architecture
from .trainer import MODES, convergence_metrics, evaluate, pretrain_base, train_loop

EXIT_OK, EXIT_USAGE, EXIT_REFUSED, EXIT_NUMERIC = 0, 1, 2, 3
DIAGNOSTICS = ("relaxation", "overhead", "latency", "sensitivity", "convergence")


class UsageError(Exception):
    pass


class Refusal(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides run.output_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing files")

    p = _Parser(prog="peml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic task collection")
    t = sub.add_parser("train", parents=[common], help="joint LoRA + prefix search training")
    t.add_argument("--mode", choices=MODES)
    sub.add_parser("search", parents=[common], help="prefix architecture search with LoRA frozen")
    sub.add_parser("hpo", parents=[common], help="TPE hyperparameter search")

    d = sub.add_parser("diagnose", parents=[common], help="analysis reports")
    d.add_argument("which", choices=DIAGNOSTICS)
    d.add_argument("--tf", type=float, help="latency: forward time per task (ms)")
    d.add_argument("--ts", type=float, help="latency: adapter switch time (ms)")
    d.add_argument("--n", type=int, help="latency: number of tasks")
    d.add_argument("--checkpoint", help="overhead: checkpoint to measure")
    d.add_argument("--seeds", type=int, default=5, help="relaxation/sensitivity: number of seeds")
    d.add_argument("--layers", type=_ints, default=None, help="sensitivity: n_layers grid")
    d.add_argument("--reps", type=_ints, default=[1], help="sensitivity: block repetition grid")
    d.add_argument("--prefix-lengths", type=_ints, default=None, help="sensitivity: prefix grid")
    d.add_argument("--steps", type=int, default=2000, help="convergence: SGD steps")
    d.add_argument("--c", type=float, default=1.0, help="convergence: step size constant")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")

    x = sub.add_parser("export-arch", parents=[common], help="write the discovered architecture")
    x.add_argument("--checkpoint")
    x.add_argument("--output")
    return p


# -- shared plumbing ----------------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.output_dir={json.dumps(args.out)}")
    if getattr(args, "mode", None):
        overrides.append(f'train.mode="{args.mode}"')
    return load_config(args.config, overrides)


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise Refusal(f"{path} exists; pass --force to overwrite")


def _collection(cfg: RunConfig) -> TaskCollection:
    coll = load_collection(cfg.data.path)
    m = cfg.model
    if coll.vocab_size != m.vocab_size or coll.max_seq > m.max_seq or coll.n_outputs != m.n_classes:
        raise PemlError(f"{cfg.data.path}: dataset (vocab {coll.vocab_size}, seq {coll.max_seq}, "
                        f"outputs {coll.n_outputs}) does not match the [data] section of the config")
    return coll


def _base(cfg: RunConfig, log) -> ToyTransformer:
    """The frozen base: ``base.path`` if set, else pretrained once and cached in the output dir."""
    if cfg.base.path:
        model = load_base(cfg.base.path)
    else:
        path = cfg.out / "base.json"
        if path.exists():
            model = load_base(path)
        else:
            log(f"pretraining base ({cfg.base.pretrain_steps} steps, seed {cfg.base.pretrain_seed})")
            coll = generate_tasks(cfg.data.specs(instructed=True), cfg.base.pretrain_seed, cfg.data.world)
            model = pretrain_base(cfg.model, coll, cfg.base.pretrain_seed, steps=cfg.base.pretrain_steps)
            save_base(model, path)
    if asdict(model.config) != asdict(cfg.model):
        raise PemlError("base model shape differs from the [model] section of the config")
    return model


def _write(path: Path, text: str, log) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log(f"wrote {path}")
    return path


def _finish(cfg: RunConfig, coll: TaskCollection, result, train_config, base, log) -> None:
    out = cfg.out
    save_result(out / "checkpoint.json", result, train_config, base)
    log(f"wrote {out / 'checkpoint.json'}")
    if result.arch is not None:
        save_architecture(result.generator, result.arch, out / "architecture.json")
        log(f"wrote {out / 'architecture.json'}")
    names = [t.spec.task_id for t in coll.tasks]
    _write(out / "history.csv", result.history_csv(names), log)
    log(f"final macro validation score {result.final_val:.4f}")


# -- commands -------------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args, log) -> int:
    path = Path(cfg.data.path)
    _check_writable(path, args.force)
    coll = generate_tasks(cfg.data.specs(), cfg.seed, cfg.data.world)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_collection(coll, path)
    log(f"wrote {path} ({coll.n_tasks} tasks)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, log, train_config=None) -> int:
    coll = _collection(cfg)
    base = _base(cfg, log)
    tc = train_config or cfg.train_config
    result = train_loop(tc, coll, base, cfg.search.space())
    _write(cfg.out / "config.toml", dump_toml(cfg), log)
    _finish(cfg, coll, result, tc, base, log)
    return EXIT_OK


def cmd_search(cfg: RunConfig, args, log) -> int:
    tc = cfg.train_config
    tc = replace(tc, mode="peml", lr_scale={**tc.lr_scale, "lora": 0.0})
    return cmd_train(cfg, args, log, tc)


def cmd_hpo(cfg: RunConfig, args, log) -> int:
    coll = _collection(cfg)
    base = _base(cfg, log)
    space, out = cfg.hpo.space(), cfg.out
    out.mkdir(parents=True, exist_ok=True)
    store = out / "trials.jsonl"
    if store.exists():
        log(f"resuming from {store}")
    tc = cfg.train_config
    res = hpo_run(space, coll, base, cfg.hpo.n_trials, seed=cfg.seed, budget=cfg.hpo.budget,
                  template=tc, search_space=cfg.search.space(), sampler=cfg.hpo.sampler,
                  tpe=cfg.hpo.tpe(), store=store, warm_start=cfg.hpo.warm_start)
    _write(out / "leaderboard.csv", leaderboard_csv(res.records, space), log)
    best = res.best_result
    if best is None:
        # resumed run: the best trial was scored earlier, rerun it for its checkpoint
        earlier = leaderboard(res.records[:res.best.trial_id]) if cfg.hpo.warm_start else []
        warm = earlier[0].architecture if earlier else None
        _, best = evaluate_trial(res.best.params, coll, base, cfg.hpo.budget, cfg.seed, tc,
                                 cfg.search.space(), res.best.trial_id, warm)
    best_tc = trial_config(res.best.params, tc, cfg.hpo.budget, cfg.seed)
    save_result(out / "best_checkpoint.json", best, best_tc, base)
    log(f"wrote {out / 'best_checkpoint.json'}")
    log(f"best trial {res.best.trial_id}: score {res.best.score:.4f} params {res.best.params}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args, log) -> int:
    out = cfg.out / "diagnostics"
    which = args.which
    if which == "latency":
        if args.tf is None or args.ts is None or args.n is None:
            raise UsageError("latency needs --tf, --ts and --n")
        rep = diag.switching_latency_model(args.tf, args.ts, args.n)
        print(f"multi-adapter: {rep.multi_adapter_ms:g} ms")
        print(f"unified: {rep.unified_ms:g} ms")
        print(f"reduction: {rep.reduction_pct:.1f}%")
        _write(out / "latency.json", json.dumps(asdict(rep), indent=2, sort_keys=True) + "\n", log)
        return EXIT_OK
    if which == "overhead":
        path = Path(args.checkpoint) if args.checkpoint else cfg.out / "checkpoint.json"
        ck = load_checkpoint(path)
        base = _base(cfg, log)
        if base.base.checksum() != ck.base_checksum:
            raise PemlError(f"{path} was trained on a different base")
        rep = diag.param_overhead(base, ck.adapters, ck.generator, ck.arch)
        print(f"base {rep.base}  lora {rep.lora}  prefix {rep.prefix}  ratio {rep.ratio:.6f}")
        _write(out / "overhead.json", rep.to_json() + "\n", log)
        return EXIT_OK

    coll = _collection(cfg)
    base = _base(cfg, log)
    tc = cfg.train_config
    if which == "relaxation":
        seeds = range(cfg.seed, cfg.seed + args.seeds)
        rep = diag.relaxation_comparison(tc, coll, base, cfg.search.space(), seeds=seeds)
        _write(out / "relaxation.csv", rep.to_csv(), log)
        _write(out / "relaxation_grad_norms.csv", rep.series_csv(), log)
        _write(out / "relaxation.json", rep.to_json() + "\n", log)
    elif which == "sensitivity":
        res = diag.sensitivity_sweep(tc, coll, base, n_layers=args.layers or [cfg.search.n_layers],
                                     block_repetition=args.reps, prefix_length=args.prefix_lengths,
                                     k=cfg.search.k, seeds=range(cfg.seed, cfg.seed + args.seeds))
        _write(out / "sensitivity.csv", res.to_csv(), log)
        print(f"best (n_layers, block_repetition, prefix_length): {res.best}")
    elif which == "convergence":
        cc = replace(tc, lr=args.c, schedule="inv_sqrt", optimizer="sgd", total_steps=args.steps,
                     steps_per_epoch=args.steps, max_epochs=1, patience=1,
                     lipschitz_every=tc.lipschitz_every or 100)
        res = train_loop(cc, coll, base, cfg.search.space())
        report = diag.convergence_report(res.history)
        report["running_mean_sq_grad"] = convergence_metrics(res.history).running_mean[-1].item()
        _write(out / "convergence_history.csv", res.history_csv([t.spec.task_id for t in coll.tasks]), log)
        _write(out / "convergence.json", json.dumps(report, indent=2, sort_keys=True) + "\n", log)
        print(f"estimated L_theta_alpha: {report['lipschitz_theta_alpha']}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else cfg.out / "checkpoint.json"


def cmd_eval(cfg: RunConfig, args, log) -> int:
    ck = load_checkpoint(_checkpoint_path(cfg, args))
    coll = _collection(cfg)
    merged = ck.merged_model(_base(cfg, log))
    scores, macro = evaluate(merged, coll, args.split, ck.generator, ck.arch, None)
    for t, s in zip(coll.tasks, scores):
        print(f"{t.spec.task_id}\t{s:.4f}")
    print(f"macro\t{macro:.4f}")
    payload = {"split": args.split, "scores": scores, "macro": macro,
               "tasks": [t.spec.task_id for t in coll.tasks]}
    _write(cfg.out / f"eval_{args.split}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n", log)
    return EXIT_OK


def cmd_export_arch(cfg: RunConfig, args, log) -> int:
    ck = load_checkpoint(_checkpoint_path(cfg, args))
    if ck.arch is None:
        raise PemlError("checkpoint has no prefix architecture (lora-only run)")
    path = Path(args.output) if args.output else cfg.out / "architecture.json"
    _check_writable(path, args.force)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_architecture(ck.generator, ck.arch, path)
    log(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "search": cmd_search, "hpo": cmd_hpo,
            "diagnose": cmd_diagnose, "eval": cmd_eval, "export-arch": cmd_export_arch}


def main(argv=None) -> int:
    def log(msg):
        print(msg, file=sys.stderr)

    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args, log)
    except UsageError as exc:
        log(f"error: {exc}")
        return EXIT_USAGE
    except Refusal as exc:
        log(f"refused: {exc}")
        return EXIT_REFUSED
    except NumericError as exc:
        log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except PemlError as exc:
        log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
