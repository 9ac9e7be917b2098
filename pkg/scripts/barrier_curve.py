"""Sweep the linear path between two checkpoints and report the barrier for
each re-normalization mode.

Defaults to the pair written by train_pair.py; point --a/--b anywhere else.
The aligned checkpoint gives the interesting curve, the raw one the broken
baseline.
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.checkpoint import load_checkpoint
from rebasin.data import hold_out, synth_embedded
from rebasin.renorm import eval_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--a", default="runs/pair/a.rbnc")
    ap.add_argument("--b", default="runs/pair/b_aligned.rbnc")
    ap.add_argument("--modes", nargs="+",
                    default=["none", "reshift", "rescale", "repair"])
    ap.add_argument("--points", type=int, default=11)
    ap.add_argument("--out", default="runs/pair")
    args = ap.parse_args()

    pool = synth_embedded(seed=777, n=7500, dims=784, d_eff=16, classes=10,
                          spread=0.40, clusters_per_class=8)
    tr, te = hold_out(pool, 1500)
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)

    grid = [i / (args.points - 1) for i in range(args.points)]
    os.makedirs(args.out, exist_ok=True)
    for mode in args.modes:
        report = eval_curve(a, b, tr, test_ds=te, grid=grid, mode=mode)
        worst = min(report.test_acc)
        print(f"mode {mode:>8}: test-acc barrier {report.barriers['test_acc']:.4f}"
              f"  (worst point {worst:.4f})")
        report.write_csv(os.path.join(args.out, f"curve-{mode}.csv"))
    print(f"curves written to {args.out}/")


if __name__ == "__main__":
    main()
