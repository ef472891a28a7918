"""Command-line driver: ``gnntickets run|validate|export-embeddings``.

``run`` expands a config into cells (method x arch x depth x width x
sparsity x fraction x seed), executes them, optionally in parallel, and
writes one CSV per cell plus ``summary.csv`` and ``manifest.json``.
A failing cell is recorded and the sweep carries on.
"""

from __future__ import annotations

import argparse
import csv
import functools
import io
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import export_embeddings, layer_grad_norms, mad, ood_eval
from .config import ExperimentConfig, config_problems, parse_config
from .graph import (Graph, load_bundle, load_linqs_dir, make_ood_split, make_splits, perturb_edges,
                    perturb_features, resolve_data_path, synth_graph)
from .models import CHECKPOINT_VERSION, ModelSpec, forward, load_checkpoint, save_checkpoint
from .search import ConfigError, SearchConfig, SparsitySchedule, dense_train, run_search

log = logging.getLogger("gnntickets")

CSV_FORMAT_VERSION = 1
EXIT_OK, EXIT_CELL_FAILED, EXIT_BAD_CONFIG = 0, 1, 2


@dataclass(frozen=True)
class Cell:
    method: str
    arch: str
    depth: int
    width: int
    sparsity: float
    fraction: float | None
    seed: int

    @property
    def name(self) -> str:
        s = f"{self.method}_{self.arch}_d{self.depth}_w{self.width}_s{self.sparsity:g}"
        if self.fraction is not None:
            s += f"_f{self.fraction:g}"
        return s + f"_seed{self.seed}"

    def group(self) -> tuple:
        return (self.method, self.arch, self.depth, self.width, self.sparsity, self.fraction)


def expand_cells(cfg: ExperimentConfig) -> list[Cell]:
    fractions = cfg.fractions if cfg.robustness else [None]
    cells = []
    for method in cfg.methods:
        sparsities = [0.0] if method == "dense" else cfg.sparsities
        for arch in cfg.archs:
            for depth in cfg.depths:
                for width in cfg.widths:
                    for s in sparsities:
                        for f in fractions:
                            for seed in cfg.seeds:
                                cells.append(Cell(method, arch, depth, width, s, f, seed))
    return cells


@functools.lru_cache(maxsize=4)
def _load(fmt: str, path: str, row_normalize: bool, synth: tuple) -> Graph:
    if fmt == "synth":
        g = synth_graph(*synth[:5], seed=synth[5])
    elif fmt == "bundle":
        g = load_bundle(path)
    else:
        g = load_linqs_dir(path)
    return g.row_normalized() if row_normalize else g


def load_graph(cfg: ExperimentConfig) -> Graph:
    synth = (cfg.synth_nodes, cfg.synth_classes, cfg.synth_features, cfg.synth_intra_p,
             cfg.synth_inter_p, cfg.synth_seed)
    path = "" if cfg.data_format == "synth" else str(cfg.resolved_data_path())
    return _load(cfg.data_format, path, cfg.row_normalize, synth)


def run_cell(cfg: ExperimentConfig, cell: Cell, out_dir: Path) -> dict:
    """Run one cell and write its CSV; returns the summary row (no timings)."""
    g = load_graph(cfg)
    splits = make_splits(g, cfg.per_class, cfg.n_val, cfg.n_test, cfg.split_seed)
    clean = g
    if cell.fraction is not None:
        perturb = perturb_features if cfg.perturb_kind == "feature" else perturb_edges
        g = perturb(g, cell.fraction, seed=cell.seed)
    fit_graph = clean if cfg.eval_only else g
    ood = None
    if cfg.ood:
        ood = make_ood_split(g, splits, cfg.ood_holdout, seed=cfg.split_seed)
        fit_graph, splits_fit = ood.training_graph(fit_graph), ood.in_distribution_splits()
    else:
        splits_fit = splits
    spec = ModelSpec(cell.arch, cell.depth, cell.width, g.n_features, fit_graph.n_classes,
                     leaky_slope=cfg.leaky_slope, gat_mask_attention=cfg.gat_mask_attention)

    extra_rows: dict[int, dict] = {}

    def callback(t, state, res, grads):
        row = extra_rows.setdefault(t, {})
        if cfg.mad and (t % cfg.mad_every == 0 or t == last_epoch):
            for l, a in enumerate(res.activations):
                row[f"mad_l{l}"] = mad(a.data, cfg.mad_max_nodes, seed=cell.seed)
        if cfg.grad_norms:
            for l, v in enumerate(layer_grad_norms(grads, spec.depth)):
                row[f"grad_norm_l{l}"] = v

    dense = cell.method == "dense"
    if dense:
        last_epoch = cfg.dense_epochs - 1
        state, record = dense_train(spec, fit_graph, splits_fit, epochs=cfg.dense_epochs, lr=cfg.dense_lr,
                                    weight_decay=cfg.dense_weight_decay, dropout=cfg.dense_dropout,
                                    seed=cell.seed, weight_init=cfg.dense_weight_init, callback=callback)
    else:
        last_epoch = cfg.epochs - 1
        sched = SparsitySchedule(cell.sparsity, cfg.s_i, cfg.t_0, cfg.delta_t, cfg.n)
        scfg = SearchConfig(sched, epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
                            mode=cell.method, seed=cell.seed, weight_init=cfg.weight_init)
        state, record = run_search(spec, fit_graph, splits_fit, scfg, callback=callback)

    for r in record.rows:
        r.update(extra_rows.get(r["epoch"], {}))
    write_cell_csv(record.rows, out_dir / "cells" / f"{cell.name}.csv")

    result = {**asdict(cell), "cell": cell.name, "status": "ok", "best_epoch": record.best_epoch,
              "best_val_acc": record.best_val_acc, "best_test_acc": record.best_test_acc,
              "final_sparsity": record.rows[-1]["current_sparsity"]}
    if cfg.eval_only and cell.fraction is not None:
        logits = forward(state, spec, g, dense=dense).logits.data
        result["best_test_acc"] = float(np.mean(np.argmax(logits[splits.test_idx], 1) == g.labels[splits.test_idx]))
    if cfg.mad:
        result["final_mad"] = record.rows[-1][f"mad_l{spec.depth - 1}"]
    if cfg.grad_norms:
        last = record.rows[-1]
        result["grad_ratio_first_last"] = last["grad_norm_l0"] / max(last[f"grad_norm_l{spec.depth - 1}"], 1e-300)
    if ood is not None:
        result["ood_auc"] = ood_eval(state, spec, g, ood, dense=dense).auc
    if cfg.checkpoints or cfg.embeddings:
        ckpt = out_dir / "checkpoints" / cell.name
        save_checkpoint(state, spec, ckpt, extra={"dense": dense, "data": _data_meta(cfg)})
        if cfg.embeddings:
            (out_dir / "embeddings").mkdir(parents=True, exist_ok=True)
        for layer in cfg.embedding_layers if cfg.embeddings else []:
            export_embeddings(state, spec, g, layer, out_dir / "embeddings" / f"{cell.name}_layer{layer}.csv",
                              dense=dense)
    return result


def _data_meta(cfg: ExperimentConfig) -> dict:
    path = "" if cfg.data_format == "synth" else str(cfg.resolved_data_path().resolve())
    return {"format": cfg.data_format, "path": path, "row_normalize": cfg.row_normalize,
            "synth": [cfg.synth_nodes, cfg.synth_classes, cfg.synth_features, cfg.synth_intra_p,
                      cfg.synth_inter_p, cfg.synth_seed]}


def write_cell_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols and k != "at_target"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None or v == "":
        return "" if v is None else str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _safe_cell(args) -> dict:
    cfg, cell, out_dir = args
    try:
        return run_cell(cfg, cell, out_dir)
    except Exception as e:  # a failed cell must not abort the sweep
        return {**asdict(cell), "cell": cell.name, "status": "failed",
                "error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}


SUMMARY_METRICS = ("best_test_acc", "best_val_acc", "final_sparsity", "final_mad", "grad_ratio_first_last", "ood_auc")


def summarize(results: list[dict]) -> str:
    """Mean and population std over seeds per cell group, as CSV text."""
    groups: dict[tuple, list[dict]] = {}
    for r in results:
        if r["status"] == "ok":
            groups.setdefault((r["method"], r["arch"], r["depth"], r["width"], r["sparsity"], r["fraction"]),
                              []).append(r)
    metrics = [m for m in SUMMARY_METRICS if any(m in r for r in results if r["status"] == "ok")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["method", "arch", "depth", "width", "sparsity", "fraction", "n_seeds"]
    for m in metrics:
        header += [f"mean_{m}", f"std_{m}"]
    w.writerow(header)
    for key, rs in groups.items():
        row = list(key[:4]) + [repr(float(key[4])), "" if key[5] is None else repr(float(key[5])), len(rs)]
        for m in metrics:
            vals = np.array([r[m] for r in rs], dtype=np.float64)
            row += [repr(float(vals.mean())), repr(float(vals.std()))]
        w.writerow(row)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> tuple[Path, list[dict]]:
    problems = config_problems(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    out = Path(out_dir if out_dir is not None else resolve_out(cfg))
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_cells(cfg)
    work = [(cfg, c, out) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_safe_cell, work))
    else:
        results = [_safe_cell(w) for w in work]
    for r in results:
        if r["status"] == "failed":
            log.error("cell %s failed: %s", r["cell"], r["error"])
    (out / "summary.csv").write_text(summarize(results))
    (out / "results.json").write_text(json.dumps([{k: v for k, v in r.items() if k != "traceback"}
                                                  for r in results], indent=2, sort_keys=True))
    manifest = {
        "config_sha256": cfg.config_hash(),
        "config": cfg.source,
        "code_version": __version__,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "csv_format_version": CSV_FORMAT_VERSION,
        "seeds": list(cfg.seeds),
        "n_cells": len(cells),
        "cells": [c.name for c in cells],
        "failed_cells": [{"cell": r["cell"], "error": r["error"]} for r in results if r["status"] == "failed"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out, results


def resolve_out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.output_dir)
    return p if p.is_absolute() else Path(cfg.base_dir) / p


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        out, results = run_experiment(cfg, args.out, args.jobs)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    failed = sum(r["status"] == "failed" for r in results)
    print(f"{len(results) - failed}/{len(results)} cells ok; results in {out}")
    return EXIT_CELL_FAILED if failed else EXIT_OK


def _cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    problems = config_problems(cfg)
    for p in problems:
        print(f"invalid config: {p}", file=sys.stderr)
    if problems:
        return EXIT_BAD_CONFIG
    print(f"ok: {len(expand_cells(cfg))} cells")
    return EXIT_OK


def _cmd_export(args) -> int:
    state, spec, meta = load_checkpoint(args.checkpoint)
    data = meta.get("data")
    if args.data is not None:
        data = {"format": args.format, "path": args.data, "row_normalize": args.row_normalize, "synth": None}
    if data is None:
        print("checkpoint records no dataset; pass --data", file=sys.stderr)
        return EXIT_BAD_CONFIG
    if data["format"] == "synth":
        g = _load("synth", "", data["row_normalize"], tuple(data["synth"]))
    else:
        g = _load(data["format"], str(resolve_data_path(data["path"])), data["row_normalize"], ())
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"embeddings_layer{args.layer}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        export_embeddings(state, spec, g, args.layer, out, dense=bool(meta.get("dense", False)))
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return EXIT_BAD_CONFIG
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="gnntickets", description="Untrained sparse subnetworks in random GNNs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every cell of an experiment config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    r.set_defaults(fn=_cmd_run)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(fn=_cmd_validate)
    e = sub.add_parser("export-embeddings", help="write per-node representations from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--layer", type=int, required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--data", default=None, help="dataset path, if not the one recorded in the checkpoint")
    e.add_argument("--format", default="linqs", choices=("linqs", "bundle"))
    e.add_argument("--row-normalize", action="store_true")
    e.set_defaults(fn=_cmd_export)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
