#!/usr/bin/env python3
"""Desk-scale pipeline: synthesize data, pre-train the toy model, then fine-tune and linear-probe it.

Writes corpora, metrics and checkpoints under --out (default ./runs/toy).
"""

import argparse
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from hivit.config import make_config
from hivit.data import synth_corpus
from hivit.train import evaluate_accuracy, load_recipe, run_finetune, run_linprobe, run_pretrain

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    cfg = make_config("toy")
    with threadpool_limits(1):
        blobs = synth_corpus(out / "blobs.hvc", 1000, 32, "gaussian-blobs", args.seed)
        shapes = synth_corpus(out / "shapes.hvc", 512, 32, "labeled-shapes", args.seed)
        pre = run_pretrain(blobs, cfg, load_recipe(str(ROOT / "recipes/toy-pretrain.txt")), out / "pretrain")
        losses = pre.step_losses
        print(f"pretrain: {pre.step} steps, loss {losses[0]:.3f} -> {np.mean(losses[-10:]):.3f}")
        ckpt = out / "pretrain" / "checkpoint.hvck"
        for name, run in (("finetune", run_finetune), ("linprobe", run_linprobe)):
            rec = load_recipe(str(ROOT / f"recipes/toy-{name}.txt"))
            st = run(shapes, cfg, rec, out / name, init_from=ckpt, num_classes=4)
            print(f"{name}: {st.step} steps, train accuracy {evaluate_accuracy(st.model, shapes):.3f}")


if __name__ == "__main__":
    main()
