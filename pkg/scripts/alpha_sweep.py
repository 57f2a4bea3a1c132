"""Sweep the head temperature on synthetic validation episodes.

The closed-set training partition is split again per class: two thirds
fit the offline stage (the D-scan needs 20 trials per class) and the rest
supply 5-way validation episodes, so test trials are never touched.

Usage::

    python scripts/alpha_sweep.py --alphas 1 5 10 16 32 --episodes 300 -o alpha_sweep.csv
"""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from tactile_fewshot.dataset import ClosedSet, make_split
from tactile_fewshot.evaluation import EpisodeSpec, dataset_features, sample_episode
from tactile_fewshot.featopt import PretrainConfig, pretrain
from tactile_fewshot.head import HeadConfig, adapt, classify_queries
from tactile_fewshot.stats import confidence_interval
from tactile_fewshot.synth import SynthConfig, synth_dataset


def validation_split(labels: np.ndarray, train_ids: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split each class of the training partition 2:1 into (fit, validation)."""
    rng = np.random.default_rng([seed, 0xA1])
    fit, val = [], []
    for c in np.unique(labels[train_ids]):
        ids = rng.permutation(train_ids[labels[train_ids] == c])
        cut = -(-2 * ids.size // 3)
        fit.extend(ids[:cut])
        val.extend(ids[cut:])
    return np.sort(fit), np.sort(val)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--alphas", type=float, nargs="+", default=[1, 5, 10, 16, 32])
    p.add_argument("--lam", type=float, default=0.10)
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--q", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")
    args = p.parse_args(argv)

    ds = synth_dataset(SynthConfig(seed=args.seed))
    F, y = dataset_features(ds), ds.labels()
    train = np.asarray(make_split(ds, ClosedSet(), args.seed).train_trial_ids)
    fit, val = validation_split(y, train, args.seed)
    model = pretrain(F[fit], y[fit], PretrainConfig())
    emb, val_labels = model.embed(F[val]), y[val]
    spec = EpisodeSpec(args.n, args.k, args.q, args.seed)

    rows = []
    for alpha in args.alphas:
        cfg = HeadConfig(alpha=alpha, lam=args.lam)
        accs = []
        for e in range(args.episodes):
            ep = sample_episode(emb, val_labels, spec, np.random.default_rng([args.seed, e, 0xA5]))
            accs.append(classify_queries(ep, adapt(ep.support, ep.support_labels, ep.n_way, cfg))[1])
        mean, half = confidence_interval(accs)
        rows.append((alpha, args.lam, mean, half))
        print(f"alpha={alpha:g}: {mean:.4f} +/- {half:.4f}", file=sys.stderr)

    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("alpha", "lam", "acc", "ci"))
        w.writerows(rows)
    finally:
        if args.output:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
