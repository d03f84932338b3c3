"""Fit 8 synthetic cards (train = val) and print the per-epoch loss breakdown."""

import argparse
import dataclasses
import logging
import time

from edgedoc import model as M
from edgedoc import training as TR
from edgedoc.experiment import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = dataclasses.replace(M.REDUCED, input_size=(args.size, args.size))
    t0 = time.time()
    res = run_overfit(args.out, args.n, args.seed, cfg, TR.OptimConfig(lr0=args.lr, epochs=args.epochs))
    print("epoch,total,cls,mask,lr")
    for h in res.history:
        print(f"{h.epoch},{h.val_loss:.5f},{h.val_cls:.5f},{h.val_mask:.5f},{h.lr:.3g}")
    print(f"lowest_total={min(h.val_loss for h in res.history):.5f}")
    print(f"seconds={time.time() - t0:.1f}")


if __name__ == "__main__":
    main()
