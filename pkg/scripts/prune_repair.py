"""One-shot pruning sweep on a small BatchNorm convnet: accuracy straight
after masking, after recomputing BatchNorm statistics on the train set, and
after recomputing them from a single 64-sample batch.
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.data import hold_out, synth_blobs
from rebasin.model import build_model, cnn_descriptor
from rebasin.prune import apply_mask, mask_from_scores, score
from rebasin.renorm import reset_bn
from rebasin.train import TrainConfig, evaluate, init_params, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--method", choices=("magnitude", "diag_fisher"),
                    default="magnitude")
    ap.add_argument("--sparsities", type=float, nargs="+",
                    default=[0.5, 0.7, 0.8, 0.9, 0.95])
    args = ap.parse_args()

    pool = synth_blobs(seed=888, n=5000, dims=256, classes=10, spread=0.55,
                       clusters_per_class=2, image_shape=(1, 16, 16))
    tr, te = hold_out(pool, 1000)
    desc = cnn_descriptor((1, 16, 16), [{"out": 16, "k": 3, "pool": 2},
                                        {"out": 32, "k": 3, "pool": 2}], 10)
    m = init_params(build_model(desc), "kaiming_uniform", args.seed)
    m, _ = train(m, tr, TrainConfig(base_lr=0.1, batch_size=128, epochs=6,
                                    seed=args.seed))
    print(f"dense model: test acc {evaluate(m, te)[1]:.4f}")

    smap = score(m, method=args.method,
                 dataset=tr if args.method == "diag_fisher" else None)
    print(f"{'sparsity':>8} {'masked':>8} {'reset':>8} {'1-batch':>8}")
    for s in args.sparsities:
        pruned = apply_mask(m, mask_from_scores(smap, s, "global"))
        acc_raw = evaluate(pruned, te)[1]
        acc_full = evaluate(reset_bn(pruned, tr, batch_size=256), te)[1]
        acc_one = evaluate(reset_bn(pruned, tr, batch_size=64, max_batches=1),
                           te)[1]
        print(f"{s:8.2f} {acc_raw:8.4f} {acc_full:8.4f} {acc_one:8.4f}")


if __name__ == "__main__":
    main()
