"""Shared loader: Cora when it has been fetched, else a small synthetic stand-in."""

from pathlib import Path

from gnntickets.graph import load_linqs_dir, make_splits, synth_graph

CORA = Path(__file__).resolve().parent.parent / "data" / "cora"


def load():
    if (CORA / "cora.content").exists():
        g = load_linqs_dir(CORA).row_normalized()
        return "cora", g, make_splits(g, 20, 500, 1000, seed=0)
    print("(Cora not found, using a synthetic block-model graph; run scripts/fetch_cora.py for the real thing)")
    g = synth_graph(600, 5, 50, 0.03, 0.002, seed=0).row_normalized()
    return "synthetic", g, make_splits(g, 20, 150, 300, seed=0)
