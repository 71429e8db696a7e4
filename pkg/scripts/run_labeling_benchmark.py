#!/usr/bin/env python3
"""Safe-set estimation benchmark on the synthetic 2-D sets.

For each set and each exclusion radius: label, count soundness violations
and incorrect removals, train the classifier, and score it against ground
truth on a dense grid.  Writes one CSV row per (set, rho) pair.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cabc.autolabel import (
    SyntheticSet,
    classifier_grid,
    incorrect_removals,
    label_synthetic,
    prop1_violation_count,
    train_synthetic_classifier,
)


def balanced_accuracy(synth, params, n_grid: int = 200) -> float:
    xs, ys, probs = classifier_grid(params, (-5.0, 5.0), n=n_grid)
    gx, gy = np.meshgrid(xs, ys)
    truth = synth.contains(np.column_stack([gx.ravel(), gy.ravel()]))
    truth = truth.reshape(n_grid, n_grid)
    pred = probs > 0.5
    tpr = (pred & truth).sum() / max(truth.sum(), 1)
    tnr = (~pred & ~truth).sum() / max((~truth).sum(), 1)
    return 0.5 * float(tpr + tnr)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--sets", default="crescent,sector")
    parser.add_argument("--rho", default="1.0,0.5,0.25")
    parser.add_argument("--n", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=123)
    parser.add_argument("--out", default="runs/labeling")
    args = parser.parse_args()

    makers = {"disk": SyntheticSet.disk, "crescent": SyntheticSet.crescent,
              "sector": SyntheticSet.sector}
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name in args.sets.split(","):
        synth = makers[name]()
        for rho in (float(t) for t in args.rho.split(",")):
            rng = np.random.default_rng(args.seed)
            plus, query, removed = label_synthetic(synth, args.n, args.n, rho, rng)
            violations = prop1_violation_count(query[removed], synth, rho)
            incorrect = incorrect_removals(removed, query, synth)
            params = train_synthetic_classifier(plus, query[~removed], seed=args.seed)
            acc = balanced_accuracy(synth, params)
            rows.append({"set": name, "rho": rho, "removed": int(removed.sum()),
                         "violations": violations, "incorrect_removals": incorrect,
                         "balanced_accuracy": round(acc, 4)})
            print(rows[-1], flush=True)
    path = os.path.join(args.out, "labeling_benchmark.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
