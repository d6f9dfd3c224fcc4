#!/usr/bin/env python3
"""Sparse vs dense step time over a sweep of mask ratios; one JSON line per ratio."""

import argparse
import json

from threadpoolctl import threadpool_limits

from hivit.bench import run_bench
from hivit.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="bench-medium")
    ap.add_argument("--ratios", default="0.01,0.25,0.5,0.75,0.9")
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    with threadpool_limits(args.threads):
        for r in (float(v) for v in args.ratios.split(",")):
            rep = run_bench(cfg, r, args.batch, args.repeats)
            print(json.dumps(rep.to_dict()), flush=True)


if __name__ == "__main__":
    main()
