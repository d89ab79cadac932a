"""Command-line entry point wiring the modules into reproducible runs.

Every subcommand accepts --config pointing at a JSON file whose keys match
the long flag names (underscored); explicit flags override file values.
Exit codes: 0 success, 2 usage problems, 3 data errors, 4 numeric failures.
Every run writes a manifest next to its primary output recording what went
in and what came out, so a rerun can be checked for drift.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from . import clustering as cl
from . import data as dt
from . import evaluation as ev
from . import models as om
from . import training as tr
from .errors import ConfigError, DataError, NumericError, ShapeError
from .gradcheck import run_gradcheck
from .synthetic import GenConfig, generate, write_ground_truth


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(path, command: str, settings: dict, outputs: list,
                   dataset_path=None, seed=None):
    """Atomic JSON manifest: what ran, on which data, what it produced."""
    doc = {
        "command": command,
        "config_hash": _sha256_json(settings),
        "settings": settings,
        "dataset_hash": _sha256_file(dataset_path) if dataset_path else None,
        "seed": seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "option_tracing": __version__,
        },
        "outputs": [str(p) for p in outputs],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _settings(args, skip=("func", "config", "manifest")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _manifest_path(args, primary_out) -> str:
    return args.manifest or f"{primary_out}.manifest.json"


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_generate(args):
    config = GenConfig(
        num_students=args.students, num_questions=args.questions,
        num_subjects=args.subjects, num_error_modes=args.modes,
        length_range=(args.length_min, args.length_max),
        learn_rate=args.learn_rate, guess=args.guess, slip=args.slip,
        misconceptions_per_student=args.misconceptions,
        expression_prob=args.expression_prob,
        ability_mean=args.ability_mean, ability_sd=args.ability_sd,
        seed=args.seed)
    dataset, truth = generate(config)
    dt.save_dataset(dataset, args.out)
    outputs = [args.out]
    if args.truth_out:
        write_ground_truth(truth, args.truth_out)
        outputs.append(args.truth_out)
    events = sum(len(s.events) for s in dataset.students)
    print(f"wrote {events} events for {dataset.num_students} students to {args.out}")
    write_manifest(_manifest_path(args, args.out), "generate", _settings(args),
                   outputs, dataset_path=args.out, seed=args.seed)
    return 0


def cmd_split(args):
    dataset = dt.load_dataset(args.data)
    spec = dt.SplitSpec(mode=args.mode, train_frac=args.train_frac,
                        val_frac=args.val_frac, test_frac=args.test_frac,
                        seed=args.seed)
    outputs = []
    if args.folds:
        for i, split in enumerate(dt.kfold(dataset, args.folds, args.mode,
                                           args.seed, val_frac=args.val_frac)):
            root, ext = os.path.splitext(args.out)
            path = f"{root}.fold{i}{ext or '.json'}"
            dt.save_split(split, None, path)
            outputs.append(path)
        print(f"wrote {args.folds} {args.mode} folds")
    else:
        split = (dt.make_cf_split(dataset, spec) if args.mode == "cf"
                 else dt.make_kt_split(dataset, spec))
        dt.save_split(split, spec, args.out)
        outputs.append(args.out)
        print(f"wrote {args.mode} split to {args.out}")
    write_manifest(_manifest_path(args, args.out), "split", _settings(args),
                   outputs, dataset_path=args.data, seed=args.seed)
    return 0


def _units_for(split, which: str):
    """Loss units for 'train', 'val' or 'test' under either protocol."""
    if isinstance(split, dt.CfSplit):
        if which == "train":
            return tr.observed_units(split.dataset.students)
        held = split.val_indices if which == "val" else split.test_indices
        return tr.held_out_units(split.dataset.students, held)
    return tr.full_units(split.subset(which))


def cmd_train(args):
    dataset = dt.load_dataset(args.data)
    split = dt.load_split(args.split, dataset)
    setup = "cf" if isinstance(split, dt.CfSplit) else "kt"
    if args.setup and args.setup != setup:
        raise ConfigError(f"--setup {args.setup} does not match the "
                          f"{setup} split in {args.split}")
    model_config = om.config_for_dataset(
        dataset, d=args.d, hidden=args.hidden, memory_slots=args.memory_slots,
        attention_heads=args.heads, max_len=args.max_len)
    model = om.build_model(args.model, args.task, model_config, args.seed,
                           question_subjects=dataset.question_subjects)
    train_config = tr.TrainConfig(lr=args.lr, epochs=args.epochs,
                                  batch_size=args.batch_size,
                                  patience=args.patience,
                                  clip_norm=args.clip_norm,
                                  weight_decay=args.weight_decay,
                                  restore_best=not args.keep_final,
                                  seed=args.seed, max_len=args.max_len)
    result = tr.train(model, _units_for(split, "train"), _units_for(split, "val"),
                      train_config,
                      progress=lambda e, tl, vl: print(
                          f"epoch {e}: train {tl:.4f} val {vl:.4f}", flush=True))
    om.save_checkpoint(model, args.out)
    history_out = args.history_out or f"{args.out}.history.json"
    with open(history_out, "w") as fh:
        json.dump({"history": result.history, "best_epoch": result.best_epoch,
                   "best_val_loss": result.best_val_loss,
                   "stopped_early": result.stopped_early},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.4f}")
    write_manifest(_manifest_path(args, args.out), "train", _settings(args),
                   [args.out, history_out], dataset_path=args.data,
                   seed=args.seed)
    return 0


def cmd_evaluate(args):
    dataset = dt.load_dataset(args.data)
    split = dt.load_split(args.split, dataset)
    model = om.load_checkpoint(args.checkpoint)
    eval_units = _units_for(split, args.subset)
    if model.task == "option":
        report = ev.evaluate_options(model, eval_units,
                                     train_units=_units_for(split, "train"),
                                     seed=args.seed)
    else:
        report = ev.evaluate_correctness(model, eval_units)
    report.write(args.out)
    outputs = [args.out]
    if args.per_question:
        report.write_per_question_csv(args.per_question)
        outputs.append(args.per_question)
    for name, value in sorted({**report.metrics, **report.baselines}.items()):
        print(f"{name}: {value:.4f}")
    write_manifest(_manifest_path(args, args.out), "evaluate", _settings(args),
                   outputs, dataset_path=args.data, seed=args.seed)
    return 0


def cmd_cluster(args):
    dataset = dt.load_dataset(args.data)
    model = om.load_checkpoint(args.checkpoint)
    clusters = cl.cluster_errors(model, dataset.correct_options, k=args.k,
                                 seed=args.seed, normalize=not args.no_normalize,
                                 restarts=args.restarts)
    clusters.write_csv(args.out)
    metrics = {"k": clusters.k, "inertia": clusters.inertia}
    if args.truth:
        reference = cl.load_cluster_csv(args.truth)
        try:
            truth_labels = np.array([reference[p] for p in clusters.pairs])
        except KeyError as exc:
            raise DataError(f"{args.truth} is missing pair {exc}") from None
        metrics["ari"] = cl.adjusted_rand_index(clusters.labels, truth_labels)
        metrics["fmi"] = cl.fowlkes_mallows(clusters.labels, truth_labels)
        print(f"ARI {metrics['ari']:.4f}  FMI {metrics['fmi']:.4f}")
    metrics_out = args.metrics_out or f"{args.out}.metrics.json"
    with open(metrics_out, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(clusters.pairs)} assignments to {args.out}")
    write_manifest(_manifest_path(args, args.out), "cluster", _settings(args),
                   [args.out, metrics_out], dataset_path=args.data,
                   seed=args.seed)
    return 0


def cmd_gradcheck(args):
    results, all_ok = run_gradcheck(seed=args.seed, points=args.points)
    for result in results:
        print(result.line())
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    write_manifest(_manifest_path(args, "gradcheck"), "gradcheck",
                   _settings(args), [], seed=args.seed)
    if not all_ok:
        raise NumericError("gradient checks failed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="otrace",
        description="Option tracing experiments: predict the exact option a "
                    "student selects and cluster incorrect options by shared "
                    "error. Set OT_THREADS to cap worker parallelism.")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, handler, **kw):
        p = subs.add_parser(name, **kw)
        p.set_defaults(func=handler)
        p.add_argument("--config", help="JSON file of flag defaults; explicit "
                                        "flags override it")
        p.add_argument("--manifest", help="manifest path (default: next to "
                                          "the primary output)")
        p.add_argument("--seed", type=int, default=0)
        registry[name] = p
        return p

    p = sub("generate", cmd_generate, help="write a synthetic dataset")
    gen = GenConfig()
    p.add_argument("--out", required=True, help="dataset path (.csv or .jsonl)")
    p.add_argument("--truth-out", help="also write planted error clusters")
    p.add_argument("--students", type=int, default=gen.num_students)
    p.add_argument("--questions", type=int, default=gen.num_questions)
    p.add_argument("--subjects", type=int, default=gen.num_subjects)
    p.add_argument("--modes", type=int, default=gen.num_error_modes)
    p.add_argument("--length-min", type=int, default=gen.length_range[0])
    p.add_argument("--length-max", type=int, default=gen.length_range[1])
    p.add_argument("--learn-rate", type=float, default=gen.learn_rate)
    p.add_argument("--guess", type=float, default=gen.guess)
    p.add_argument("--slip", type=float, default=gen.slip)
    p.add_argument("--misconceptions", type=int,
                   default=gen.misconceptions_per_student)
    p.add_argument("--expression-prob", type=float, default=gen.expression_prob)
    p.add_argument("--ability-mean", type=float, default=gen.ability_mean)
    p.add_argument("--ability-sd", type=float, default=gen.ability_sd)

    p = sub("split", cmd_split, help="write a reusable train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("cf", "kt"), required=True)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--folds", type=int, help="write k cross-validation splits "
                                             "instead of one")

    p = sub("train", cmd_train, help="train a model against a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history-out", help="loss history JSON "
                                         "(default: <out>.history.json)")
    p.add_argument("--model", choices=sorted(om.MODEL_KINDS), default="pobidkt")
    p.add_argument("--task", choices=("option", "correctness"), default="option")
    p.add_argument("--setup", choices=("cf", "kt"),
                   help="protocol sanity check against the split file")
    p.add_argument("--d", type=int, default=16, help="embedding width")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--memory-slots", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--keep-final", action="store_true",
                   help="keep the last epoch's weights instead of restoring "
                        "the best validation epoch")

    p = sub("evaluate", cmd_evaluate, help="score a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--subset", choices=("val", "test"), default="test")
    p.add_argument("--per-question", help="also write a per-question CSV")

    p = sub("cluster", cmd_cluster, help="cluster incorrect options from a "
                                         "pair-embedding checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="assignments CSV path")
    p.add_argument("--metrics-out", help="metrics JSON "
                                         "(default: <out>.metrics.json)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--no-normalize", action="store_true",
                   help="cluster raw embeddings instead of unit vectors")
    p.add_argument("--truth", help="reference clusters CSV; adds ARI and FMI")

    p = sub("gradcheck", cmd_gradcheck,
            help="finite-difference check of every primitive and model")
    p.add_argument("--points", type=int, default=100,
                   help="random points per primitive")

    return parser, registry


def _apply_config_file(parser, registry, argv, args):
    try:
        with open(args.config) as fh:
            file_values = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(file_values, dict):
        raise ConfigError("config file must hold a JSON object")
    sub = registry[args.command]
    valid = {action.dest for action in sub._actions}
    unknown = sorted(set(file_values) - valid)
    if unknown:
        raise ConfigError(f"config keys not recognized by "
                          f"'{args.command}': {unknown}")
    sub.set_defaults(**file_values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config_file(parser, registry, argv, args)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
