"""Train every model on one dataset and print a comparison table.

By default generates the synthetic dataset, then runs the requested models
under the requested protocol and reports option accuracy / macro F1 against
the majority and random baselines.

    python3 scripts/run_benchmark.py --setup cf --models pobidkt dkt ncf
    python3 scripts/run_benchmark.py --data responses.csv --setup kt
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from option_tracing import data as dt
from option_tracing import evaluation as ev
from option_tracing import models as om
from option_tracing import training as tr
from option_tracing.synthetic import GenConfig, generate


def units_for(split, which):
    if isinstance(split, dt.CfSplit):
        if which == "train":
            return tr.observed_units(split.dataset.students)
        held = split.val_indices if which == "val" else split.test_indices
        return tr.held_out_units(split.dataset.students, held)
    return tr.full_units(split.subset(which))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", help="dataset CSV/JSONL; synthetic if omitted")
    ap.add_argument("--setup", choices=("cf", "kt"), default="cf")
    ap.add_argument("--models", nargs="+", default=["ncf", "dkt", "pobidkt"],
                    choices=sorted(om.MODEL_KINDS))
    ap.add_argument("--task", choices=("option", "correctness"), default="option")
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="benchmark_out")
    args = ap.parse_args()

    if args.data:
        ds = dt.load_dataset(args.data)
    else:
        print("generating synthetic dataset ...")
        ds, _ = generate(GenConfig(seed=args.seed))
    spec = dt.SplitSpec(mode=args.setup, seed=args.seed)
    split = (dt.make_cf_split(ds, spec) if args.setup == "cf"
             else dt.make_kt_split(ds, spec))
    train_u, val_u, test_u = (units_for(split, w) for w in ("train", "val", "test"))

    os.makedirs(args.out_dir, exist_ok=True)
    config = om.config_for_dataset(ds, d=args.d, hidden=args.hidden)
    tcfg = tr.TrainConfig(lr=args.lr, epochs=args.epochs, patience=args.patience,
                          seed=args.seed)
    rows = []
    for kind in args.models:
        model = om.build_model(kind, args.task, config, args.seed,
                               question_subjects=ds.question_subjects)
        t0 = time.time()
        result = tr.train(model, train_u, val_u, tcfg)
        minutes = (time.time() - t0) / 60
        if args.task == "option":
            report = ev.evaluate_options(model, test_u, train_units=train_u,
                                         seed=args.seed)
        else:
            report = ev.evaluate_correctness(model, test_u)
        report.write(os.path.join(args.out_dir, f"{kind}_{args.setup}.json"))
        om.save_checkpoint(model, os.path.join(args.out_dir,
                                               f"{kind}_{args.setup}.ckpt"))
        rows.append((kind, report, result, minutes))
        print(f"  {kind}: done in {minutes:.1f} min "
              f"(best epoch {result.best_epoch})")

    print(f"\n{args.setup.upper()} test results")
    if args.task == "option":
        print(f"{'model':<10} {'acc':>7} {'macroF1':>8} {'nll':>7}  best_ep")
        baselines = rows[0][1].baselines
        for kind, report, result, _ in rows:
            m = report.metrics
            print(f"{kind:<10} {m['accuracy']:>7.4f} {m['macro_f1']:>8.4f} "
                  f"{m['nll']:>7.4f}  {result.best_epoch}")
        print(f"{'majority':<10} {baselines['majority_accuracy']:>7.4f} "
              f"{baselines['majority_macro_f1']:>8.4f}")
        print(f"{'random':<10} {baselines['random_accuracy']:>7.4f} "
              f"{baselines['random_macro_f1']:>8.4f}")
    else:
        print(f"{'model':<10} {'acc':>7}  base_rate")
        for kind, report, result, _ in rows:
            print(f"{kind:<10} {report.metrics['accuracy']:>7.4f}  "
                  f"{report.baselines['base_rate']:.4f}")


if __name__ == "__main__":
    main()
