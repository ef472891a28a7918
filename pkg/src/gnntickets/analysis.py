"""Metrics and experiment harnesses: accuracy, MAD, gradient norms, ROC-AUC, OOD and robustness."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .graph import Graph, OodSplit, Splits, perturb_edges, perturb_features
from .models import ModelSpec, ModelState, Operators, forward


@dataclass(frozen=True)
class MadReport:
    values: tuple[float, ...]
    epoch: int = -1


@dataclass(frozen=True)
class OodReport:
    auc: float
    score_kind: str
    n_in: int
    n_ood: int


def accuracy(logits, labels, idx) -> float:
    """Fraction of ``idx`` whose argmax logit (lowest class on ties) equals the label."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy needs at least one node")
    z = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(z[idx], axis=1) == np.asarray(labels)[idx]))


def mad(h, max_nodes: int = 1000, seed: int = 0, tol: float = 1e-12) -> float:
    """Mean average cosine distance between node representations.

    Distances below ``tol`` count as exact zeros, so rows pointing the same
    way (up to rounding) are treated as identical. A zero row is at distance
    1 from any nonzero row and 0 from another zero row.
    """
    h = h.data if isinstance(h, ad.Tensor) else np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    if n < 2:
        raise ValueError("mad needs at least two nodes")
    if n > max_nodes:
        h = h[np.sort(np.random.default_rng(seed).choice(n, size=max_nodes, replace=False))]
    norms = np.linalg.norm(h, axis=1)
    zero = norms == 0
    u = h / np.where(zero, 1.0, norms)[:, None]
    d = np.clip(1.0 - u @ u.T, 0.0, 2.0)
    d[np.ix_(zero, ~zero)] = 1.0
    d[np.ix_(~zero, zero)] = 1.0
    d[np.ix_(zero, zero)] = 0.0
    np.fill_diagonal(d, 0.0)
    d[d < tol] = 0.0
    nz = np.count_nonzero(d, axis=1)
    has = nz > 0
    if not has.any():
        return 0.0
    return float(np.mean(d[has].sum(axis=1) / nz[has]))


def layer_mads(activations, max_nodes: int = 1000, seed: int = 0, epoch: int = -1) -> MadReport:
    return MadReport(tuple(mad(a, max_nodes, seed) for a in activations), epoch)


def layer_grad_norms(grads: Mapping[tuple[int, str], np.ndarray], depth: int) -> list[float]:
    sq = np.zeros(depth)
    for (l, _), g in grads.items():
        sq[l] += float(np.sum(g * g))
    return list(np.sqrt(sq))


def layer_gradient_norms(state: ModelState, spec: ModelSpec, g: Graph, splits: Splits,
                         mode: str = "masked") -> list[float]:
    """Per-layer L2 norm of the training-loss gradient.

    ``masked`` differentiates w.r.t. ``theta * mask``; ``dense`` w.r.t.
    ``theta`` with every weight active.
    """
    if mode not in ("masked", "dense"):
        raise ValueError("mode must be 'masked' or 'dense'")
    tape = ad.Tape()
    res = forward(state, spec, g, tape, dense=(mode == "dense"))
    loss = ad.softmax_cross_entropy(res.logits, g.labels, splits.train_idx)
    grads = ad.backward(tape, loss)
    norms = layer_grad_norms({k: grads[t] for k, t in res.leaves.items()}, spec.depth)
    if not all(np.isfinite(norms)):
        raise ad.NumericFault("non-finite gradient norm")
    return norms


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative examples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ood_eval(state: ModelState, spec: ModelSpec, g: Graph, ood: OodSplit, splits: Splits | None = None,
             dense: bool = False) -> OodReport:
    """Detect held-out-class test nodes by maximum softmax probability.

    Positives are in-distribution test nodes, negatives the held-out-class
    nodes of the same test set. ``state`` must output one logit per
    in-distribution class.
    """
    if spec.out_dim != ood.n_in_classes:
        raise ValueError(f"model has {spec.out_dim} outputs, split keeps {ood.n_in_classes} classes")
    test = (splits if splits is not None else ood.splits).test_idx
    is_ood = ood.is_ood(test)
    if is_ood.all() or not is_ood.any():
        raise ValueError("test set must contain both in-distribution and held-out-class nodes")
    logits = forward(state, spec, ood.training_graph(g), dense=dense).logits.data
    msp = softmax(logits[test]).max(axis=1)
    return OodReport(roc_auc(msp, ~is_ood), "max_softmax_probability", int((~is_ood).sum()), int(is_ood.sum()))


SearchFn = Callable[[ModelSpec, Graph, Splits, int], tuple]


def robustness_eval(methods: Mapping[str, SearchFn] | SearchFn, spec: ModelSpec, g: Graph, splits: Splits,
                    perturb_kind: str, fractions: Sequence[float], seeds: Sequence[int],
                    eval_only: bool = False) -> list[dict]:
    """Test accuracy under feature or edge perturbation, one row per (method, fraction).

    Each method is called as ``fn(spec, graph, splits, seed)`` and returns
    ``(state, record)``. By default the perturbed graph is used for the whole
    search/training run; with ``eval_only`` the model is fitted on the clean
    graph and only evaluated on the perturbed one. The perturbation seed is
    the run seed.
    """
    if perturb_kind not in ("feature", "edge"):
        raise ValueError("perturb_kind must be 'feature' or 'edge'")
    if callable(methods):
        methods = {"method": methods}
    perturb = perturb_features if perturb_kind == "feature" else perturb_edges
    rows = []
    for name, fn in methods.items():
        fitted = {}
        for frac in fractions:
            if not 0.0 <= frac <= 1.0:
                raise ValueError("fractions must lie in [0, 1]")
            accs = []
            for seed in seeds:
                pg = perturb(g, frac, seed=seed)
                if eval_only:
                    if seed not in fitted:
                        fitted[seed] = fn(spec, g, splits, seed)
                    state, record = fitted[seed]
                    dense = bool(record.extras.get("dense", False))
                    logits = forward(state, spec, pg, dense=dense).logits.data
                    accs.append(accuracy(logits, pg.labels, splits.test_idx))
                else:
                    _, record = fn(spec, pg, splits, seed)
                    accs.append(record.best_test_acc)
            rows.append({"method": name, "perturb_kind": perturb_kind, "fraction": float(frac),
                         "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs)),
                         "n_seeds": len(accs)})
    return rows


def export_embeddings(state: ModelState, spec: ModelSpec, g: Graph, layer: int, path,
                      dense: bool = False) -> None:
    """Write ``node_id,label,h_0..h_k`` rows for the output of ``layer`` (0-based)."""
    if not 0 <= layer < spec.depth:
        raise ValueError(f"layer must lie in [0, {spec.depth})")
    h = forward(state, spec, Operators(g), dense=dense).activations[layer].data
    ids = g.node_ids if g.node_ids is not None else [str(i) for i in range(g.n_nodes)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node_id", "label"] + [f"h{j}" for j in range(h.shape[1])])
        for i in range(g.n_nodes):
            w.writerow([ids[i], int(g.labels[i])] + [repr(float(v)) for v in h[i]])
