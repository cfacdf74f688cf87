"""Mean distance between periodised diffusion matrices at successive sizes, ||D_2N - D_N||."""

import argparse

import numpy as np

from rcmhomog.corrector import diffusion_matrix, solve_corrector
from rcmhomog.lattice import TORUS, DistributionSpec, LatticeSpec, sample_environment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--sizes", default="4,8,16,32")
    p.add_argument("--dist", default="two-point:0.5,1,3")
    p.add_argument("--seeds", type=int, default=50)
    args = p.parse_args()

    sizes = [int(n) for n in args.sizes.split(",")]
    dist = DistributionSpec.parse(args.dist)
    gaps = np.zeros((args.seeds, len(sizes) - 1))
    for s in range(args.seeds):
        D = []
        for N in sizes:
            env = sample_environment(LatticeSpec(args.d, N, TORUS), dist, s)
            D.append(diffusion_matrix(env, solve_corrector(env)))
        gaps[s] = [np.linalg.norm(b - a) for a, b in zip(D, D[1:])]
    for (a, b), m, sd in zip(zip(sizes, sizes[1:]), gaps.mean(0), gaps.std(0, ddof=1)):
        print(f"||D_{b} - D_{a}||  mean {m:.5f}  sd {sd:.5f}")
    print("decreasing:", bool(np.all(np.diff(gaps.mean(0)) < 0)))


if __name__ == "__main__":
    main()
