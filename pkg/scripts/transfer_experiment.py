"""MoCo vs supervised vs scratch initialisation on a synthetic cohort; prints per-run test AUCs."""
import argparse
import json
import logging
from dataclasses import replace

from cxrprog.experiments import TransferConfig, run_transfer


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.add_argument("--no-supervised", action="store_true")
    p.add_argument("--json", help="write the result dict here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = TransferConfig(runs=tuple(range(args.runs)))
    cfg.pretrain = replace(cfg.pretrain, epochs=args.pretrain_epochs)
    if args.no_supervised:
        cfg.supervised = None
    res = run_transfer(cfg)
    for name, aucs in res["runs"].items():
        print(f"{name:>14s}  mean {res['mean'][name]:.4f}  runs {' '.join(f'{a:.4f}' for a in aucs)}")
    print(f"MoCo FT - scratch: {res['mean']['moco_ft'] - res['mean']['scratch']:+.4f}  ({res['seconds']:.0f}s)")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
