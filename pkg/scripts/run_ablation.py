"""Five-rung ablation ladder over several independently trained policies.

Each seed s trains its own policy, draws its own calibration set (seed 42+s)
and is evaluated on rollout seed 1000+s. Writes one CSV row per (seed, rung)
and prints the per-rung means.

    python scripts/run_ablation.py --bpw 2.5 --seeds 0 1 2 3 4 --out ladder.csv
"""
import argparse
import csv
import sys

import numpy as np

from aqkit.harness import ReachTask, train_policy
from aqkit.harness.pipeline import ablation_ladder, gen_calibration


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bpw", type=float, default=2.5)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--episodes", type=int, default=500)
    ap.add_argument("--K", type=int, default=60)
    ap.add_argument("--out", default=None, help="CSV path (default: stdout)")
    args = ap.parse_args(argv)

    task = ReachTask()
    rows, by_rung = [], {}
    for s in args.seeds:
        pol = train_policy(task, seed=s)
        cal = gen_calibration(pol, task, args.K, 42 + s)
        for r in ablation_ladder(pol, cal, args.bpw, [1000 + s], task, args.episodes):
            rows.append([s, r.rung, r.name, f"{r.mean_success:.4f}", f"{r.weighted_error:.6e}",
                         f"{r.achieved_bpw:.4f}"])
            by_rung.setdefault((r.rung, r.name), []).append(r.mean_success)
        print(f"seed {s} done", file=sys.stderr)

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["seed", "rung", "name", "success", "weighted_error", "achieved_bpw"])
    w.writerows(rows)
    if args.out:
        fh.close()
    base = np.mean(by_rung[min(by_rung)])
    for (rung, name), v in sorted(by_rung.items()):
        print(f"rung {rung} {name:<20} mean {np.mean(v):.3f}  vs rtn {100 * (np.mean(v) - base):+.1f} pts",
              file=sys.stderr)


if __name__ == "__main__":
    main()
