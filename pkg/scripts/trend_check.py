"""Train presets A, B and C briefly on synthetic data and compare their PR curves.

Writes <out>/{A,B,C}/pr.csv, pr.svg, summary.json and <out>/report.json.
"""
import argparse
import json
import logging

from scenediff.cli import parse_size
from scenediff.experiments import TrendSetup, trend_report


def main():
    d = TrendSetup()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--size", default="%dx%d" % d.size)
    ap.add_argument("--train-pairs", type=int, default=d.train_pairs)
    ap.add_argument("--eval-pairs", type=int, default=d.eval_pairs)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--seed", type=int, default=d.seed)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    setup = TrendSetup(size=parse_size(args.size), train_pairs=args.train_pairs,
                       eval_pairs=args.eval_pairs, epochs=args.epochs, seed=args.seed)
    report = trend_report(args.out, setup)
    print(json.dumps({"best_by_area": report["best_by_area"]}, indent=2))


if __name__ == "__main__":
    main()
