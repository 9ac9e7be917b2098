"""Train a population of networks from different seeds and compare merging
strategies: plain weight averaging versus averaging after reference,
sequential, or iterative alignment.
"""
import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.data import hold_out, synth_embedded
from rebasin.match import mean_models, multi_match
from rebasin.model import build_model, mlp_descriptor
from rebasin.train import TrainConfig, evaluate, init_params, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--hidden", type=int, nargs="+", default=[512, 512])
    ap.add_argument("--epochs", type=int, default=12)
    args = ap.parse_args()

    pool = synth_embedded(seed=777, n=7500, dims=784, d_eff=16, classes=10,
                          spread=0.40, clusters_per_class=8)
    tr, te = hold_out(pool, 1500)
    steps_per_epoch = tr.num_batches(128)

    models, accs = [], []
    t0 = time.time()
    for seed in range(args.count):
        m = init_params(build_model(mlp_descriptor(784, args.hidden, 10)),
                        "kaiming_uniform", seed)
        cfg = TrainConfig(base_lr=0.1, batch_size=128, epochs=args.epochs,
                          seed=seed, schedule="step", decay_factor=10.0,
                          milestones=(int(args.epochs * 0.7 * steps_per_epoch),))
        m, _ = train(m, tr, cfg)
        models.append(m)
        accs.append(evaluate(m, te)[1])
    print(f"{args.count} end models: acc mean {np.mean(accs):.4f} "
          f"min {min(accs):.4f} max {max(accs):.4f} ({time.time() - t0:.0f}s)")

    print(f"{'plain average':>18}: acc {evaluate(mean_models(models), te)[1]:.4f}")
    for strategy in ("reference", "sequential", "iterative"):
        merged, _ = multi_match(models, strategy=strategy)
        note = ""
        if strategy == "iterative":
            note = (f"  ({merged.meta['merge']['iterations']} rounds, "
                    f"converged {merged.meta['merge']['converged']})")
        print(f"{strategy + ' merge':>18}: acc {evaluate(merged, te)[1]:.4f}{note}")


if __name__ == "__main__":
    main()
