"""
Finding an accurate subnetwork inside a random GCN
==================================================

The weights below are never trained. Only a real-valued score per weight
is optimised, and the forward pass keeps the top-scoring fraction. Two
search variants are compared at moderate and extreme sparsity:

* ``ugts`` ramps the sparsity up linearly and ranks all layers together;
* ``edge_popup`` starts at the final sparsity and ranks each layer alone.
"""

import numpy as np

from _data import load
from gnntickets.models import ModelSpec, effective_sparsity
from gnntickets.search import SearchConfig, SparsitySchedule, run_search

name, g, spl = load()
spec = ModelSpec("GCN", 2, 256, g.n_features, g.n_classes)
print(f"{name}: GCN 2x256, scores searched for 400 epochs, weights frozen at init\n")

for s_f in (0.5, 0.99):
    for mode in ("ugts", "edge_popup"):
        state, rec = run_search(spec, g, spl, SearchConfig(SparsitySchedule(s_f), mode=mode, seed=0))
        kept = [int(p.mask.sum()) for p in state.maskable(spec)]
        print(f"sparsity {s_f:<4}  {mode:<10}  test {rec.best_test_acc:.3f}  "
              f"(epoch {rec.best_epoch}, {effective_sparsity(state, spec):.4f} zeroed, kept per layer {kept})")

# the ramp: sparsity actually applied over the first epochs of the last run
curve = [r["current_sparsity"] for r in rec.rows]
print("\nedge_popup holds its sparsity from epoch 0:", np.round(curve[:3], 4).tolist())
state, rec = run_search(spec, g, spl, SearchConfig(SparsitySchedule(0.99), seed=0))
curve = [r["current_sparsity"] for r in rec.rows]
print("ugts ramps it:", [round(curve[t], 3) for t in (0, 50, 100, 150, 199, 250)])
