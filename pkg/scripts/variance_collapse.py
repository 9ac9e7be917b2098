"""Show hidden pre-activation scale shrinking boundary by boundary in the
naive average of two deep networks, then recovering once each boundary is
rescaled to the mixed end-model statistics.

Prints one row per hidden boundary: the end models' average scale, the
midpoint's, and the midpoint's after RESCALE.
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rebasin.data import hold_out, synth_embedded
from rebasin.model import build_model, mlp_descriptor
from rebasin.probes import channel_probe
from rebasin.renorm import goal_stats, interpolate, repair
from rebasin.train import TrainConfig, evaluate, init_params, train


def scales(model, ds):
    probe = channel_probe(model, ds, batch_size=256, with_fisher=False)
    return {bid: row["pre_scale"] for bid, row in probe.rows.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=8)
    args = ap.parse_args()

    pool = synth_embedded(seed=777, n=7500, dims=784, d_eff=16, classes=10,
                          spread=0.40, clusters_per_class=8)
    tr, te = hold_out(pool, 1500)

    models = []
    for seed in (0, 1):
        m = init_params(build_model(mlp_descriptor(
            784, [args.width] * args.depth, 10)), "kaiming_uniform", seed)
        m, _ = train(m, tr, TrainConfig(base_lr=0.1, batch_size=128,
                                        epochs=args.epochs, seed=seed))
        models.append(m)
    a, b = models

    mid = interpolate(a, b, 0.5)
    goals = goal_stats(a, b, 0.5, tr)
    fixed = repair(mid, goals, tr, mode="rescale", sequential=True)

    sc_a, sc_b = scales(a, tr), scales(b, tr)
    sc_mid, sc_fix = scales(mid, tr), scales(fixed, tr)
    print(f"{'boundary':>8} {'ends':>8} {'midpoint':>9} {'rescaled':>9}")
    for bid in sc_a:
        ends = 0.5 * (sc_a[bid] + sc_b[bid])
        print(f"{bid:>8} {ends:8.4f} {sc_mid[bid]:9.4f} {sc_fix[bid]:9.4f}")

    for label, model in (("end a", a), ("end b", b), ("midpoint", mid),
                         ("rescaled midpoint", fixed)):
        print(f"{label}: test acc {evaluate(model, te)[1]:.4f}")


if __name__ == "__main__":
    main()
