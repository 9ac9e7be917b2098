"""Train two networks from different seeds, align one to the other, and
print the midpoint picture: test accuracy at the ends, at the naive average,
and at the average after weight matching.

Checkpoints land in --out so the other scripts can reuse them.
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.checkpoint import save_checkpoint
from rebasin.data import hold_out, synth_embedded
from rebasin.match import apply_perm, weight_match
from rebasin.model import build_model, mlp_descriptor
from rebasin.renorm import interpolate
from rebasin.train import TrainConfig, evaluate, init_params, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs=2, default=(0, 1))
    ap.add_argument("--hidden", type=int, nargs="+", default=[256, 256, 256])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--out", default="runs/pair")
    args = ap.parse_args()

    pool = synth_embedded(seed=777, n=7500, dims=784, d_eff=16, classes=10,
                          spread=0.40, clusters_per_class=8)
    tr, te = hold_out(pool, 1500)

    models = []
    for seed in args.seeds:
        m = init_params(build_model(mlp_descriptor(784, args.hidden, 10)),
                        "kaiming_uniform", seed)
        m, log = train(m, tr, TrainConfig(base_lr=args.lr, batch_size=128,
                                          epochs=args.epochs, seed=seed))
        loss, acc = evaluate(m, te)
        print(f"seed {seed}: train loss {log.losses[-1]:.4f}  test acc {acc:.4f}")
        models.append(m)
    a, b = models

    perm, report = weight_match(a, b)
    b_aligned = apply_perm(b, perm)
    print(f"weight matching: {report.sweeps} sweeps, "
          f"residual {report.residual_l2:.2f}, converged {report.converged}")

    for label, mid in (("naive average", interpolate(a, b, 0.5)),
                       ("matched average", interpolate(a, b_aligned, 0.5))):
        loss, acc = evaluate(mid, te)
        print(f"{label}: test loss {loss:.4f}  acc {acc:.4f}")

    os.makedirs(args.out, exist_ok=True)
    for name, m in (("a", a), ("b", b), ("b_aligned", b_aligned)):
        save_checkpoint(m, os.path.join(args.out, f"{name}.rbnc"))
    print(f"checkpoints written to {args.out}/")


if __name__ == "__main__":
    main()
