"""Masking-strategy comparison on the synthetic desk corpus (5 seeds).

    python scripts/desk_experiment.py --cache runs/desk.json

Prints mean Recall@10 / nDCG@10 per method, the median best epoch, and
paired t-tests of every BTBR variant against G-TopFreq.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from nnbr.evaluation import paired_t_test
from nnbr.experiments import DESK_METHODS, DeskSettings, desk_experiment


def pooled(runs, method, key="recall@10"):
    vals = []
    for seed in sorted(runs, key=int):
        vals.extend(r[key] for r in runs[seed][method]["result"]["per_user"])
    return np.array(vals)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", type=Path, default=Path("runs/desk.json"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    settings = DeskSettings(seeds=tuple(range(args.seeds)))
    out = desk_experiment(settings, cache=args.cache)
    runs = out["runs"]
    base = pooled(runs, "g_topfreq")
    print(f"{'method':16s} {'R@10':>7s} {'N@10':>7s} {'best ep':>8s}  vs G-TopFreq")
    for m in ("g_topfreq",) + DESK_METHODS:
        r10 = np.mean([runs[s][m]["result"]["recall"]["10"] for s in runs])
        n10 = np.mean([runs[s][m]["result"]["ndcg"]["10"] for s in runs])
        best = [runs[s][m]["best_epoch"] for s in runs]
        line = f"{m:16s} {r10:7.4f} {n10:7.4f} "
        line += f"{np.median(best):8.1f}" if best[0] is not None else f"{'-':>8s}"
        if m != "g_topfreq":
            t = paired_t_test(pooled(runs, m), base)
            line += f"  t={t.statistic:6.2f} p={t.p_value:.2e}"
        print(line)
    print(json.dumps({s: {m: runs[s][m]["best_epoch"] for m in DESK_METHODS} for s in runs}))


if __name__ == "__main__":
    main()
