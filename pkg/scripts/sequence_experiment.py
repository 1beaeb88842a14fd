"""Multi-image transformer vs single-image baselines, with and without planted temporal trend."""
import argparse
import json
import logging

from cxrprog.experiments import SequenceConfig, pretrained_encoder, run_sequence
from cxrprog.synth import SynthConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trend", type=float, default=SequenceConfig().synth.trend)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--json", help="write both result dicts here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    seeds = tuple(range(args.seeds))
    encoder = pretrained_encoder(SynthConfig(trend=args.trend))
    out = {}
    for trend in (args.trend, 0.0):
        res = run_sequence(SequenceConfig(synth=SynthConfig(trend=trend), seeds=seeds), encoder)
        out[f"trend={trend}"] = res
        print(f"trend {trend}: " + "  ".join(f"{k} {v:.4f}" for k, v in res["mean"].items())
              + f"  gap {res['gap']:+.4f}  ({res['seconds']:.0f}s)")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
