"""Killed-walk point statistic: empirical variance against the N^-2 Var(theta) lower bound.

Also reports the last-visit decomposition gap and the sign of the
covariance between neighbouring log Green values.
"""

import argparse
import json
import math

from rcmhomog.experiments import PotentialExperimentConfig, variance_lower_bound_experiment
from rcmhomog.lattice import DistributionSpec


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--sizes", default="2,4,8")
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--potential", default=f"two-point:0.5,0,{math.e - 1!r}", help="law of V; default gives theta in {0, 1}")
    p.add_argument("--seed", type=int, default=8)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", help="also write the full report here")
    args = p.parse_args()

    cfg = PotentialExperimentConfig(
        d=args.d,
        N_list=tuple(int(n) for n in args.sizes.split(",")),
        potential_dist=DistributionSpec.parse(args.potential),
        samples=args.samples,
        master_seed=args.seed,
    )
    report = variance_lower_bound_experiment(cfg, threads=args.threads)
    print(f"Var theta = {report['var_theta']:.4f}")
    for row in report["per_N"]:
        print(f"N={row['N']:>3}  Var f = {row['var']:.5f}  bound = {row['bound']:.5f}  "
              f"pass={row['pass']}  last-visit gap {row['max_decomposition_gap']:.1e}")
    print("overall:", "PASS" if report["passed"] else "FAIL")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
