"""Train EdgeDoc on a synthetic 200/60 corpus with the default recipe and report validation metrics."""

import argparse
import logging

from edgedoc.experiment import run_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--val", type=int, default=60)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_synthetic(args.out, args.train, args.val, args.seed)
    print(res.report.table("EdgeDoc (synthetic)"))
    print(f"best_epoch={res.best_epoch}")
    for kind, f1 in res.pixel_f1_by_kind.items():
        print(f"pixel_f1_{kind}={f1:.4f}")
    print(f"seconds={res.seconds:.1f}")


if __name__ == "__main__":
    main()
