"""Greedy allocator against the brute-force optimum on random instances."""
import argparse
import time

import numpy as np

from aqkit.allocator import brute_force_allocate, greedy_allocate, random_instance


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--show", type=int, default=5, help="print the worst N instances")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    rows = []
    for i in range(args.n):
        inst = random_instance(rng)
        g, b = greedy_allocate(inst), brute_force_allocate(inst)
        r = g.objective / b.objective if b.objective > 0 else 1.0
        rows.append((r, i, g.bits() == b.bits(), g.objective, b.objective, inst))
    ratios = np.array([r[0] for r in rows])
    print(f"{args.n} instances in {time.time() - t0:.1f}s")
    print(f"exact {sum(r[2] for r in rows)}/{args.n}, max ratio {ratios.max():.3f}, "
          f"above 1.25: {int(np.sum(ratios > 1.25))}, "
          f"aggregate {sum(r[3] for r in rows) / sum(r[4] for r in rows):.4f}")
    print("ratio quantiles 50/90/99:", np.round(np.quantile(ratios, [0.5, 0.9, 0.99]), 3))
    for r, i, _, go, bo, inst in sorted(rows, key=lambda t: -t[0])[:args.show]:
        sc = [round(e.score, 2) for e in inst.table.entries]
        print(f"  #{i} ratio {r:.3f} greedy {go:.3e} opt {bo:.3e} budget {inst.budget:.3f} "
              f"menu {[q.bit_width for q in inst.type_menu]} scores {sc}")


if __name__ == "__main__":
    main()
