"""Measurement probes over models and model pairs.

channel_probe reads per-boundary activation scale in one streaming pass;
retrain_probe clocks how many mini-batches a model needs to hit a train
accuracy target. Every probe leaves its model untouched.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .model import POST, PRE, forward, stat_key, wiring

PROBE_COLUMNS = ("pre_scale", "pre_std", "post_scale", "post_std",
                 "zero_frac", "weight_scale")


def l2_distance(model_a, model_b, include_norm_stats=False):
    """Euclidean distance in parameter space.

    Running statistics and tracked boundary statistics are excluded unless
    include_norm_stats is set; learned tensors always count.
    """
    keys_a, keys_b = set(model_a.params), set(model_b.params)
    if keys_a != keys_b:
        raise ValueError(f"models hold different tensors: {sorted(keys_a ^ keys_b)}")
    total = 0.0
    for k in sorted(keys_a):
        if not include_norm_stats and stat_key(k):
            continue
        d = model_a.params[k].astype(np.float64) - model_b.params[k].astype(np.float64)
        total += float(np.sum(d * d))
    return float(np.sqrt(total))


@dataclass
class LayerProbe:
    """Per-boundary activation scales plus per-weight-layer Fisher means."""
    rows: dict = field(default_factory=dict)    # bid -> column dict
    fisher: dict = field(default_factory=dict)  # weight tensor -> mean info
    batch_count: int = 0

    def to_jsonable(self):
        return {"rows": {bid: dict(row) for bid, row in self.rows.items()},
                "fisher": dict(self.fisher),
                "batch_count": self.batch_count}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("boundary",) + PROBE_COLUMNS)
            for bid, row in self.rows.items():
                w.writerow([bid] + [repr(row[c]) for c in PROBE_COLUMNS])

    def summary(self):
        parts = [f"{bid}: |pre|={row['pre_scale']:.4g} |post|={row['post_scale']:.4g} "
                 f"zero={row['zero_frac']:.3f}" for bid, row in self.rows.items()]
        return "; ".join(parts)


def channel_probe(model, dataset, batch_size=256, max_batches=None,
                  with_fisher=True):
    """Stream per-boundary activation statistics over the dataset (eval mode).

    Scales are mean absolute values in double precision, pooled over samples,
    spatial positions, and channels; zero_frac counts exactly-zero entries
    after the boundary's post chain. with_fisher adds the mean diagonal
    Fisher information of every conv/dense weight tensor.
    """
    wir = wiring(model)
    taps = [(b.bid, ph) for b in wir.values() for ph in (PRE, POST)]
    acc = {bid: np.zeros(6, dtype=np.float64) for bid in wir}  # per-phase sums
    zeros = {bid: 0 for bid in wir}
    counts = {bid: 0 for bid in wir}
    batch_count = 0
    for b, (xb, _) in enumerate(dataset.batches(batch_size, shuffle=False,
                                                drop_last=True)):
        if max_batches is not None and b >= max_batches:
            break
        _, tap_list = forward(model, xb, taps=taps, mode="eval")
        for tap in tap_list:
            v = tap.value.astype(np.float64).reshape(-1)
            bid = tap.boundary_id
            off = 0 if tap.phase == PRE else 3
            acc[bid][off + 0] += np.abs(v).sum()
            acc[bid][off + 1] += v.sum()
            acc[bid][off + 2] += (v * v).sum()
            if tap.phase == POST:
                zeros[bid] += int((v == 0).sum())
            else:
                counts[bid] += v.size
        batch_count += 1
    if batch_count == 0:
        raise ValueError("dataset smaller than one batch")

    rows = {}
    for bid, bnd in wir.items():
        n = counts[bid]
        s = acc[bid]
        w = model.params[f"{model.layers[bnd.producer].name}.w"]
        rows[bid] = {
            "pre_scale": s[0] / n,
            "pre_std": float(np.sqrt(max(s[2] / n - (s[1] / n) ** 2, 0.0))),
            "post_scale": s[3] / n,
            "post_std": float(np.sqrt(max(s[5] / n - (s[4] / n) ** 2, 0.0))),
            "zero_frac": zeros[bid] / n,
            "weight_scale": float(np.abs(w.astype(np.float64)).mean()),
        }
    fisher = {}
    if with_fisher:
        from .prune import _diag_fisher, prunable_keys  # avoids an import cycle
        limit = max_batches if max_batches is not None else None
        raw = _diag_fisher(model.copy(), prunable_keys(model), dataset,
                           batch_size, limit)
        fisher = {k: float(v.mean()) for k, v in raw.items()}
    return LayerProbe(rows=rows, fisher=fisher, batch_count=batch_count)


@dataclass
class RetrainReport:
    steps: int          # mini-batches until train accuracy first hit target
    curve: list         # (iteration, train accuracy) rows, one per step
    capped: bool        # True when the epoch cap ran out below target


def retrain_probe(model, dataset, target_train_acc=0.9, lr=0.01, cap_epochs=5,
                  batch_size=128, momentum=0.9, seed=0):
    """Count mini-batches of fixed-lr SGD until train accuracy reaches target.

    Accuracy is evaluated on the full training set after every step (and once
    before any step, so an already-converged model reports 0). Hitting the
    epoch cap first returns the total step count with capped set.
    """
    from .train import evaluate, loss_and_grads  # circular at module load
    cur = model.copy()
    _, acc = evaluate(cur, dataset, batch_size=max(batch_size, 256))
    curve = [(0, acc)]
    if acc >= target_train_acc:
        return RetrainReport(steps=0, curve=curve, capped=False)
    vel = {}
    it = 0
    for epoch in range(cap_epochs):
        for xb, yb in dataset.batches(batch_size, seed=seed, epoch=epoch):
            _, grads = loss_and_grads(cur, xb, yb, update_stats=True)
            for k, g in grads.items():
                if k == "x" or stat_key(k):
                    continue
                vel[k] = (momentum * vel.get(k, 0.0) + g).astype(np.float32)
                cur.params[k] = (cur.params[k] - lr * vel[k]).astype(np.float32)
            it += 1
            _, acc = evaluate(cur, dataset, batch_size=max(batch_size, 256))
            curve.append((it, acc))
            if acc >= target_train_acc:
                return RetrainReport(steps=it, curve=curve, capped=False)
    return RetrainReport(steps=it, curve=curve, capped=True)
