"""Unstructured weight pruning and statistics-based repair of the survivors.

Scoring produces one nonnegative float64 array per conv/dense weight tensor;
masks drop the lowest-scored coordinates (exactly floor(sparsity * count) of
them, globally or per tensor) and survivors keep their bits. Biases and norm
parameters are never pruned.
"""
import base64
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .model import WEIGHT_KINDS
from .renorm import measure_stats, repair, reset_bn
from .train import _forward_cached

METHODS = ("magnitude", "diag_fisher")
GRANULARITIES = ("global", "layerwise")


def prunable_keys(model, exempt_first=False):
    """Weight-tensor names eligible for pruning, in layer order.

    exempt_first drops the first weight layer (its input channels carry raw
    data, and zeroing them is disproportionately destructive).
    """
    keys = [f"{s.name}.w" for s in model.layers if s.kind in WEIGHT_KINDS]
    return keys[1:] if exempt_first else keys


@dataclass
class ScoreMap:
    """Per-coordinate saliency for every prunable tensor (higher = keep)."""
    method: str
    scores: dict = field(default_factory=dict)   # name -> float64 array

    def to_jsonable(self):
        return {"method": self.method,
                "scores": {k: {"shape": list(v.shape),
                               "data": [float(x) for x in v.reshape(-1)]}
                           for k, v in self.scores.items()}}

    @classmethod
    def from_jsonable(cls, obj):
        scores = {}
        for k, rec in obj["scores"].items():
            arr = np.asarray(rec["data"], dtype=np.float64)
            scores[k] = arr.reshape(rec["shape"])
        return cls(method=obj["method"], scores=scores)


@dataclass
class PruneMask:
    """Boolean keep-masks per tensor plus the request that produced them."""
    sparsity: float
    granularity: str
    keep: dict = field(default_factory=dict)     # name -> bool array

    def count_total(self):
        return sum(v.size for v in self.keep.values())

    def count_dropped(self):
        return sum(int((~v).sum()) for v in self.keep.values())

    def to_jsonable(self):
        # raw bitmask blob: packbits over the flat mask, base64 for transport
        masks = {}
        for k, v in self.keep.items():
            packed = np.packbits(v.reshape(-1))
            masks[k] = {"shape": list(v.shape),
                        "packed": base64.b64encode(packed.tobytes()).decode("ascii")}
        return {"sparsity": self.sparsity, "granularity": self.granularity,
                "masks": masks}

    @classmethod
    def from_jsonable(cls, obj):
        keep = {}
        for k, rec in obj["masks"].items():
            raw = np.frombuffer(base64.b64decode(rec["packed"]), dtype=np.uint8)
            n = int(np.prod(rec["shape"]))
            keep[k] = np.unpackbits(raw)[:n].astype(bool).reshape(rec["shape"])
        return cls(sparsity=obj["sparsity"], granularity=obj["granularity"],
                   keep=keep)


# ---------------------------------------------------------------- scoring

def _fisher_accumulate(model, caches, dper, acc):
    """Add per-sample squared weight gradients to acc, walking like backprop.

    dper holds d(per-sample loss)/d(layer output) rows, one per sample; all
    layers here act sample-independently (batchnorm ran on running stats), so
    squaring per-sample contributions before the reduction is exact.
    """
    p = model.params
    dy = dper
    for spec, cache in reversed(caches):
        kind, name = spec.kind, spec.name
        if kind == "dense":
            x = cache
            g64 = dy.astype(np.float64)
            acc[f"{name}.w"] += g64.T ** 2 @ x.astype(np.float64) ** 2
            dy = dy @ p[f"{name}.w"]
        elif kind == "conv2d":
            cols, x_shape = cache
            n, cout, ho, wo = dy.shape
            dy_mat = dy.reshape(n, cout, ho * wo).transpose(0, 2, 1)
            g = np.einsum("npo,npk->nok", dy_mat.astype(np.float64),
                          cols.astype(np.float64))
            acc[f"{name}.w"] += (g ** 2).sum(axis=0).reshape(
                p[f"{name}.w"].shape)
            k = spec.kernel
            dcols = dy_mat @ p[f"{name}.w"].reshape(cout, -1)
            dy = ops.col2im(dcols, x_shape, k, spec.stride, spec.pad, (ho, wo))
        elif kind == "relu":
            dy = ops.relu_bwd(cache, dy)
        elif kind == "maxpool2d":
            x_shape, arg = cache
            dy = ops.maxpool_bwd(x_shape, arg, spec.kernel, spec.stride, dy)
        elif kind == "flatten":
            dy = dy.reshape(cache)
        elif kind == "batchnorm":
            dy = ops.batchnorm_bwd(cache, dy)[0]
        elif kind == "layernorm":
            dy = ops.layernorm_bwd(cache, dy)[0]
        elif kind == "channel_affine":
            dy = ops.channel_affine_bwd(cache, p[f"{name}.scale"], dy)[0]
        else:
            raise ValueError(f"cannot score through layer kind {kind!r}")


def _diag_fisher(model, keys, dataset, batch_size, max_batches):
    acc = {k: np.zeros(model.params[k].shape, dtype=np.float64) for k in keys}
    seen = 0
    for b, (xb, yb) in enumerate(dataset.batches(batch_size, shuffle=False,
                                                 drop_last=False)):
        if max_batches is not None and b >= max_batches:
            break
        logits, caches = _forward_cached(model, xb, update_stats=False,
                                         bn_batch_stats=False)
        # d(per-sample loss)/dlogits = softmax - onehot, one row per sample
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(axis=1, keepdims=True)
        prob[np.arange(len(yb)), yb] -= 1.0
        _fisher_accumulate(model, caches, prob.astype(logits.dtype), acc)
        seen += len(yb)
    if seen == 0:
        raise ValueError("dataset smaller than one batch")
    return {k: v / seen for k, v in acc.items()}


def score(model, method="magnitude", dataset=None, batch_size=64,
          max_batches=None, scale_by_weight_sq=True, exempt_first=False):
    """Build a ScoreMap over the prunable tensors.

    magnitude:   |w|
    diag_fisher: mean over samples of the squared per-sample loss gradient,
                 multiplied by w^2 unless scale_by_weight_sq is off. Needs a
                 dataset; batchnorm runs on its running statistics so the
                 per-sample gradients stay independent.
    """
    if method not in METHODS:
        raise ValueError(f"unknown scoring method {method!r}, "
                         f"expected one of {METHODS}")
    keys = prunable_keys(model, exempt_first=exempt_first)
    if method == "magnitude":
        return ScoreMap(method, {k: np.abs(model.params[k].astype(np.float64))
                                 for k in keys})
    if dataset is None:
        raise ValueError("diag_fisher scoring needs a dataset")
    fisher = _diag_fisher(model, keys, dataset, batch_size, max_batches)
    if scale_by_weight_sq:
        fisher = {k: v * model.params[k].astype(np.float64) ** 2
                  for k, v in fisher.items()}
    return ScoreMap(method, fisher)


# ---------------------------------------------------------------- masks

def _drop_lowest(scores, count, tensor_idx):
    """Flat indices of the `count` lowest scores; ties resolve by tensor
    order then flat index, both ascending."""
    order = np.lexsort((np.arange(scores.size), tensor_idx, scores))
    return order[:count]


def mask_from_scores(smap, sparsity, granularity="global"):
    """Keep-mask dropping floor(sparsity * count) coordinates of lowest score.

    global pools every tensor into one ranking; layerwise applies the quota
    to each tensor separately.
    """
    if not isinstance(sparsity, (int, float)) or math.isnan(sparsity) \
            or not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}, "
                         f"expected one of {GRANULARITIES}")
    keep = {}
    if granularity == "layerwise":
        for k, s in smap.scores.items():
            flat = s.reshape(-1)
            drop = _drop_lowest(flat, math.floor(sparsity * flat.size),
                                np.zeros(flat.size, dtype=np.int64))
            mask = np.ones(flat.size, dtype=bool)
            mask[drop] = False
            keep[k] = mask.reshape(s.shape)
    else:
        names = list(smap.scores)
        flats = [smap.scores[k].reshape(-1) for k in names]
        tensor_idx = np.concatenate([np.full(f.size, i, dtype=np.int64)
                                     for i, f in enumerate(flats)])
        pooled = np.concatenate(flats)
        drop = _drop_lowest(pooled, math.floor(sparsity * pooled.size),
                            tensor_idx)
        mask = np.ones(pooled.size, dtype=bool)
        mask[drop] = False
        lo = 0
        for k, f in zip(names, flats):
            keep[k] = mask[lo:lo + f.size].reshape(smap.scores[k].shape)
            lo += f.size
    return PruneMask(sparsity=float(sparsity), granularity=granularity,
                     keep=keep)


def apply_mask(model, mask):
    """Zero the dropped coordinates; survivors keep their exact bits."""
    out = model.copy()
    for k, keep in mask.keep.items():
        if k not in out.params:
            raise ValueError(f"mask names unknown tensor {k}")
        w = out.params[k]
        if keep.shape != w.shape:
            raise ValueError(f"mask shape {keep.shape} does not match "
                             f"{k} shape {w.shape}")
        out.params[k] = np.where(keep, w, w.dtype.type(0.0))
    return out


# ---------------------------------------------------------------- repair

def post_prune_repair(pruned, original, dataset, mode="reset", batch_size=256,
                      sequential=False, max_batches=None):
    """Recalibrate a pruned network's statistics without touching weights.

    reset:  recompute batchnorm running statistics on the pruned net (errors
            when the architecture has no batchnorm to reset).
    repair: measure per-boundary activation statistics on the original net
            and insert affine corrections that restore them on the pruned
            one; corrections fold away afterwards via fold_affine.
    """
    if pruned.boundary_map != original.boundary_map or \
            set(pruned.params) != set(original.params):
        raise ValueError("pruned and original models differ in architecture")
    if mode == "reset":
        if not any(s.kind == "batchnorm" for s in pruned.layers):
            raise ValueError("reset repair needs batchnorm layers")
        return reset_bn(pruned, dataset, batch_size=batch_size,
                        max_batches=max_batches)
    if mode == "repair":
        goals = measure_stats(original, dataset, batch_size=batch_size,
                              max_batches=max_batches)
        return repair(pruned, goals, dataset, mode="repair",
                      sequential=sequential, batch_size=batch_size)
    raise ValueError(f"unknown repair mode {mode!r}")
