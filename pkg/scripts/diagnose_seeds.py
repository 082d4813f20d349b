"""Per-seed Spearman correlation between influence rank and the product of
oracle and estimated advantages, at one round of a standard run.
"""
import argparse
import statistics

from rlattrib.config import parse_config
from rlattrib.experiment import mismatch_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0-4")
    ap.add_argument("--round", type=int, default=5)
    ap.add_argument("--env", default="frozenlake")
    args = ap.parse_args()
    cfg = parse_config(flags={"env": args.env, "seeds": args.seeds})
    rhos = []
    for seed in cfg.seeds:
        _, rho = mismatch_rows(cfg, seed, args.round)
        rhos.append(rho)
        print(f"seed {seed}: rho {rho:+.3f}")
    print(f"median rho {statistics.median(rhos):+.3f}")


if __name__ == "__main__":
    main()
