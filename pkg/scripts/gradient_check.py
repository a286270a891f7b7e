#!/usr/bin/env python3
"""Taylor-remainder verification of the adjoint shape gradient.

Locates the first branch point on the unit disk, then for a handful of
random smooth directions prints the remainder |J(s) - J(0) - s <g, W>| over
halving step lengths together with the contraction ratios, which should sit
near 4 for a correct gradient.
"""

import argparse
import sys

import numpy as np

from bifshape import mesh as msh
from bifshape import moore_spence as ms
from bifshape import shape as shp


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--h", type=float, default=0.1)
    parser.add_argument("--target", type=float, default=3.0)
    parser.add_argument("--directions", type=int, default=5)
    parser.add_argument("--levels", type=int, default=4)
    parser.add_argument("--s0", type=float, default=0.04)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    mesh = msh.gen_unit_disk(args.h)
    state = ms.ms_initialize(mesh, np.zeros(mesh.num_vertices), 1.3, n=3)
    print(f"branch point at lambda = {state.lam:.8f}, objective target {args.target}")

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for k in range(args.directions):
        W = shp.random_smooth_direction(mesh, rng)
        rem = shp.taylor_remainders(mesh, state, args.target, W, s0=args.s0, levels=args.levels)
        ratios = rem[:-1] / rem[1:]
        worst = max(worst, abs(ratios - 4.0).max())
        table = "  ".join(f"{r:.3e}" for r in rem)
        print(f"direction {k}: remainders {table}  ratios {np.round(ratios, 3)}")
    print(f"max deviation of contraction ratio from 4: {worst:.3f}")
    return 0 if worst < 0.6 else 1


if __name__ == "__main__":
    sys.exit(main())
