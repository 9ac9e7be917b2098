"""How many mini-batches does a midpoint model need to climb back to 90%
train accuracy?  Compares the naive average of two networks with the
average taken after weight matching.
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.data import hold_out, synth_embedded
from rebasin.match import apply_perm, weight_match
from rebasin.model import build_model, mlp_descriptor
from rebasin.probes import retrain_probe
from rebasin.renorm import interpolate
from rebasin.train import TrainConfig, evaluate, init_params, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs=2, default=(0, 1))
    ap.add_argument("--hidden", type=int, nargs="+", default=[256, 256, 256])
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--target", type=float, default=0.9)
    args = ap.parse_args()

    pool = synth_embedded(seed=777, n=7500, dims=784, d_eff=16, classes=10,
                          spread=0.40, clusters_per_class=8)
    tr, te = hold_out(pool, 1500)

    models = []
    for seed in args.seeds:
        m = init_params(build_model(mlp_descriptor(784, args.hidden, 10)),
                        "kaiming_uniform", seed)
        m, _ = train(m, tr, TrainConfig(base_lr=0.1, batch_size=128,
                                        epochs=8, seed=seed))
        models.append(m)
    a, b = models

    perm, _ = weight_match(a, b)
    for label, mid in (("naive midpoint", interpolate(a, b, 0.5)),
                       ("matched midpoint", interpolate(a, apply_perm(b, perm), 0.5))):
        rep = retrain_probe(mid, tr, target_train_acc=args.target, lr=args.lr,
                            cap_epochs=20, batch_size=128)
        start = rep.curve[0][1]
        tail = "hit the cap" if rep.capped else f"reached it in {rep.steps} steps"
        print(f"{label}: test acc {evaluate(mid, te)[1]:.4f}, starts at "
              f"{start:.3f} train acc, {tail}")


if __name__ == "__main__":
    main()
