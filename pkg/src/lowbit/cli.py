"""Command-line entry points: train, eval, report, selftest."""

from __future__ import annotations

import argparse
import os
import sys

from .errors import LowbitError


def _cmd_train(args):
    from .harness import run_experiment
    res = run_experiment(args.config, output_dir=args.output_dir)
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoint: {res.final_checkpoint}")
    print(f"best top-1: {res.best_top1:.2f}%  final top-1: {res.final_top1:.2f}%")
    return 0


def _cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .data import DataBundle, load_cifar10, load_idx, synthetic_dataset
    from .harness import DATA_ROOT_ENV, evaluate
    from .network import ModelSpec

    meta, _ = load_checkpoint(args.checkpoint)
    spec = ModelSpec.from_dict(meta["model_spec"])
    path = args.data_path or os.environ.get(DATA_ROOT_ENV, "")
    if args.dataset == "synthetic":
        train, test = synthetic_dataset(args.synthetic_train, args.synthetic_test,
                                        num_classes=spec.num_classes,
                                        channels=spec.in_channels,
                                        seed=args.synthetic_seed)
    elif args.dataset == "cifar10":
        train, test = load_cifar10(path, "train"), load_cifar10(path, "test")
    else:
        train = load_idx(os.path.join(path, "train-images-idx3-ubyte"),
                         os.path.join(path, "train-labels-idx1-ubyte"), "train")
        test = load_idx(os.path.join(path, "t10k-images-idx3-ubyte"),
                        os.path.join(path, "t10k-labels-idx1-ubyte"), "test")
    bundle = DataBundle(train, test, batch_size=args.batch_size,
                        augment_train=False, input_bits=spec.input_bits)
    bits = None
    if args.bits:
        w, a = args.bits.split(",")
        bits = (int(w), int(a))
    top1, top5 = evaluate(args.checkpoint, bundle, bits_override=bits)
    print(f"top-1: {top1:.2f}%  top-5: {top5:.2f}%")
    return 0


def _cmd_report(args):
    from .report import emit_report
    table, charts = emit_report(args.csvs, args.out_dir)
    print(f"table: {table}")
    for c in charts:
        print(f"chart: {c}")
    return 0


def _cmd_selftest(_args):
    from .selftest import run_selftest
    return 0 if run_selftest() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="lowbit",
                                description="Low-bitwidth CNN training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment from a config file")
    t.add_argument("config")
    t.add_argument("--output-dir", default=None)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", choices=("synthetic", "cifar10", "mnist"),
                   default="synthetic")
    e.add_argument("--data-path", default="")
    e.add_argument("--bits", default=None, help="override precision, e.g. 2,2")
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--synthetic-train", type=int, default=2000)
    e.add_argument("--synthetic-test", type=int, default=1000)
    e.add_argument("--synthetic-seed", type=int, default=7)
    e.set_defaults(fn=_cmd_eval)

    r = sub.add_parser("report", help="summarize metrics CSVs into a table and charts")
    r.add_argument("csvs", nargs="+")
    r.add_argument("--out-dir", default="report")
    r.set_defaults(fn=_cmd_report)

    s = sub.add_parser("selftest", help="run the built-in invariant suites")
    s.set_defaults(fn=_cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LowbitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
