"""Closed-loop success against bits-per-weight for RTN and the full method.

    python scripts/bpw_sweep.py --bpw 8 4 3 2.5 2 --seeds 0 1 2
"""
import argparse

import numpy as np

from aqkit.harness import ReachTask, rollout_success, train_policy
from aqkit.harness.pipeline import dequantized_policy, gen_calibration, ladder_plans


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bpw", type=float, nargs="+", default=[8.0, 4.0, 3.0, 2.5, 2.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--episodes", type=int, default=500)
    args = ap.parse_args(argv)

    task = ReachTask()
    res = {b: {"rtn": [], "full": []} for b in args.bpw}
    fp = []
    for s in args.seeds:
        pol = train_policy(task, seed=s)
        cal = gen_calibration(pol, task, 60, 42 + s)
        fp.append(rollout_success(pol.act, task, args.episodes, 1000 + s))
        for b in args.bpw:
            plans, _ = ladder_plans(pol, cal, b)
            for key, idx in (("rtn", 0), ("full", 4)):
                q = dequantized_policy(pol, plans[idx][1])
                res[b][key].append(rollout_success(q.act, task, args.episodes, 1000 + s))

    print(f"full precision {np.mean(fp):.3f}")
    print("bpw    rtn    full")
    for b in args.bpw:
        print(f"{b:<5}  {np.mean(res[b]['rtn']):.3f}  {np.mean(res[b]['full']):.3f}")


if __name__ == "__main__":
    main()
