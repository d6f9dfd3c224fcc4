#!/usr/bin/env python3
"""Parameter/FLOP table for every preset, dense and at mask ratio 0.75."""

import argparse

from hivit.config import PRESETS, make_config
from hivit.profile import GOLDEN, check_golden, count_params_flops


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratio", type=float, default=0.75)
    args = ap.parse_args()
    print(f"{'preset':>13} {'params(M)':>10} {'GFLOPs':>8} {'GFLOPs@sparse':>14} {'reference':>14}  status")
    bad = 0
    for name in PRESETS:
        rep = count_params_flops(make_config(name), args.ratio)
        ref = "{}M/{}G".format(*GOLDEN[name]) if name in GOLDEN else "-"
        problems = check_golden(name, rep)
        bad += bool(problems)
        print(f"{name:>13} {rep.total_params / 1e6:>10.3f} {rep.total_flops / 1e9:>8.3f} "
              f"{rep.total_flops_sparse / 1e9:>14.3f} {ref:>14}  {'; '.join(problems) or 'ok'}")
    raise SystemExit(1 if bad else 0)


if __name__ == "__main__":
    main()
