"""
Robustness to feature noise, and spotting unseen classes
========================================================

Two stress tests for a sparse subnetwork against a trained dense GCN.
First, 40% of the nodes get their features replaced by coin flips before
fitting. Second, a few classes are hidden during fitting and the model's
maximum softmax probability is used to flag test nodes from those classes.
Takes about five minutes on one core with Cora.
"""

from _data import load
from gnntickets.analysis import ood_eval, robustness_eval
from gnntickets.graph import make_ood_split
from gnntickets.models import ModelSpec
from gnntickets.search import SearchConfig, SparsitySchedule, dense_train, run_search

name, g, spl = load()
spec = ModelSpec("GCN", 2, 256, g.n_features, g.n_classes)

methods = {
    "ugts s=0.9": lambda sp_, gg, ss, seed: run_search(sp_, gg, ss, SearchConfig(SparsitySchedule(0.9), seed=seed)),
    "dense": lambda sp_, gg, ss, seed: dense_train(sp_, gg, ss, seed=seed),
}
print(f"{name}: test accuracy with a fraction of feature rows replaced by noise")
for row in robustness_eval(methods, spec, g, spl, "feature", [0.0, 0.2, 0.4], seeds=[0, 1]):
    print(f"  {row['method']:<11} fraction {row['fraction']:.1f}: {row['mean_acc']:.3f} +- {row['std_acc']:.3f}")

ood = make_ood_split(g, spl, 0.4, seed=0)
held = sorted(set(range(g.n_classes)) - set(ood.in_classes))
print(f"\nheld-out classes {held}; fitting on the remaining {ood.n_in_classes}")
tg, ts = ood.training_graph(g), ood.in_distribution_splits()
spec_in = ModelSpec("GCN", 2, 256, g.n_features, ood.n_in_classes)
for label, fit, is_dense in (
        ("ugts s=0.9", lambda: run_search(spec_in, tg, ts, SearchConfig(SparsitySchedule(0.9), seed=0)), False),
        ("dense", lambda: dense_train(spec_in, tg, ts, seed=0), True)):
    state, rec = fit()
    rep = ood_eval(state, spec_in, g, ood, dense=is_dense)
    print(f"  {label:<11} in-distribution test {rec.best_test_acc:.3f}  "
          f"OOD AUC {rep.auc:.3f} ({rep.n_in} in vs {rep.n_ood} held out)")
print("\nAUC 0.5 means the confidence score carries no information about novelty; higher is better.")
