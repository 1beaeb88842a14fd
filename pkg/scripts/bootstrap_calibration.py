"""Coverage of percentile bootstrap CIs and bootstrap/DeLong agreement on binormal scores."""
import argparse

from cxrprog.experiments import bootstrap_coverage, paired_agreement


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--scenarios", type=int, default=100)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cov = bootstrap_coverage(args.trials, 500, 0.75, args.n_boot, args.seed)
    agree = paired_agreement(args.scenarios, args.n_boot, seed=args.seed)
    print(f"95% CI coverage of AUC 0.75 over {args.trials} trials: {cov:.3f}")
    print(f"bootstrap/DeLong significance agreement over {args.scenarios} scenarios: {agree:.2f}")


if __name__ == "__main__":
    main()
