"""Score-based subnetwork search over frozen random weights, plus the dense baseline.

Search modes

``ugts``
    gradual sparsity schedule, global (cross-layer) top-k selection.
``ugts_no_global``
    gradual schedule, per-layer top-k.
``ugts_no_gradual``
    target sparsity from the first epoch, global top-k.
``edge_popup``
    target sparsity from the first epoch, per-layer top-k.

In every mode the scores receive straight-through gradients
``dL/dS = dL/d(theta * m) * theta`` (masked-out weights included) and are
updated with Adam; ``theta`` is never written.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .graph import Graph, Splits
from .models import ModelSpec, ModelState, Operators, effective_sparsity, forward, init_model

log = logging.getLogger(__name__)

MODES = ("ugts", "edge_popup", "ugts_no_global", "ugts_no_gradual")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SparsitySchedule:
    s_f: float
    s_i: float = 0.0
    t_0: int = 0
    delta_t: int = 1
    n: int = 200

    def __post_init__(self):
        if not (0.0 <= self.s_i <= self.s_f < 1.0):
            raise ConfigError(f"need 0 <= s_i <= s_f < 1, got s_i={self.s_i}, s_f={self.s_f}")
        if self.n < 1 or self.delta_t < 1:
            raise ConfigError("schedule needs n >= 1 and delta_t >= 1")

    @property
    def end(self) -> int:
        return self.t_0 + self.n * self.delta_t


def schedule_sparsity(t: int, sched: SparsitySchedule) -> float:
    """Linear ramp from ``s_i`` at ``t_0`` to ``s_f`` at ``t_0 + n * delta_t``.

    Between adjusting steps the value of the most recent step is held.
    """
    if t >= sched.end:
        return sched.s_f
    step = sched.t_0 + ((t - sched.t_0) // sched.delta_t) * sched.delta_t
    if step <= sched.t_0:
        # the closed form rounds at the left endpoint; it must be exactly s_i
        return sched.s_i
    return sched.s_f + (sched.s_i - sched.s_f) * (1.0 - (step - sched.t_0) / (sched.n * sched.delta_t))


@dataclass(frozen=True)
class SearchConfig:
    schedule: SparsitySchedule
    epochs: int = 400
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    mode: str = "ugts"
    seed: int = 0
    weight_init: str = "kaiming_uniform"

    def __post_init__(self):
        for problem in self.problems():
            raise ConfigError(problem)

    def problems(self) -> list[str]:
        out = []
        if self.mode not in MODES:
            out.append(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0:
            out.append("lr must be positive")
        if self.epochs < self.schedule.end:
            out.append(f"epochs={self.epochs} is shorter than the schedule (t_0 + n * delta_t = {self.schedule.end})")
        return out


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    best_test_acc: float = float("nan")
    extras: dict = field(default_factory=dict)

    FIELDS = ("epoch", "train_loss", "val_acc", "test_acc", "current_sparsity", "wall_time")

    def deterministic_rows(self) -> list[tuple]:
        """Rows without wall-clock time, for reproducibility comparisons."""
        return [tuple(r[k] for k in self.FIELDS if k != "wall_time") for r in self.rows]

    def select(self, eligible: Callable[[dict], bool] = lambda r: True) -> None:
        best = None
        for r in self.rows:
            if eligible(r) and (best is None or r["val_acc"] > best["val_acc"]):
                best = r
        if best is not None:
            self.best_epoch = best["epoch"]
            self.best_val_acc = best["val_acc"]
            self.best_test_acc = best["test_acc"]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.FIELDS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_acc": self.best_val_acc,
                "best_test_acc": self.best_test_acc, "epochs": len(self.rows), **self.extras}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Thresholding
# ---------------------------------------------------------------------------


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary mask keeping the ``k`` largest entries; ties go to the lower flat index."""
    flat = np.asarray(scores).reshape(-1)
    n = flat.size
    mask = np.zeros(n)
    if k <= 0:
        return mask.reshape(np.shape(scores))
    if k >= n:
        return np.ones(np.shape(scores))
    kth = np.partition(flat, n - k)[n - k]
    above = flat > kth
    mask[above] = 1.0
    need = k - int(above.sum())
    mask[np.flatnonzero(flat == kth)[:need]] = 1.0
    return mask.reshape(np.shape(scores))


def _keep_count(target: float, total: int) -> int:
    return int(np.floor((1.0 - target) * total + 0.5))


def _assign(params, mask_flat: np.ndarray) -> None:
    start = 0
    for p in params:
        p.mask = mask_flat[start:start + p.size].reshape(p.theta.shape).copy()
        start += p.size


def global_threshold(state: ModelState, target_sparsity: float, spec: ModelSpec | None = None) -> list[np.ndarray]:
    """Keep the ``round((1 - s) * N)`` largest scores across all layers jointly."""
    params = state.maskable(spec)
    flat = np.concatenate([p.scores.reshape(-1) for p in params])
    _assign(params, topk_mask(flat, _keep_count(target_sparsity, flat.size)))
    for l, layer in enumerate(state.layers):
        ids = {id(p) for p in params}
        if all(not p.mask.any() for p in layer.values() if id(p) in ids):
            log.warning("global threshold at s=%.4f removed every weight of layer %d", target_sparsity, l)
    return [p.mask for p in params]


def layerwise_threshold(state: ModelState, target_sparsity: float, spec: ModelSpec | None = None) -> list[np.ndarray]:
    """Keep the ``round((1 - s) * d_l)`` largest scores within each layer."""
    maskable = state.maskable(spec)
    ids = {id(p) for p in maskable}
    for layer in state.layers:
        params = [p for p in layer.values() if id(p) in ids]
        flat = np.concatenate([p.scores.reshape(-1) for p in params])
        _assign(params, topk_mask(flat, _keep_count(target_sparsity, flat.size)))
    return [p.mask for p in maskable]


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam with optional L2 weight decay added to the gradient."""

    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """Update ``params[key]`` in place for every key in ``grads``."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, g in grads.items():
            x = params[key]
            if self.weight_decay:
                g = g + self.weight_decay * x
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(x)
                self.v[key] = np.zeros_like(x)
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            x -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def straight_through(state: ModelState, grads: dict) -> dict:
    """Score gradients from effective-weight gradients: ``dL/dS = dL/d(theta*m) * theta``."""
    out = {}
    for (l, name), g in grads.items():
        out[(l, name)] = g * state.layers[l][name].theta
    return out


def score_step(state: ModelState, grads: dict, opt: Adam, lr: float | None = None) -> None:
    """One straight-through Adam step on the scores; ``grads`` are w.r.t. ``theta * mask``."""
    sg = straight_through(state, grads)
    for g in sg.values():
        if not np.all(np.isfinite(g)):
            raise ad.NumericFault("non-finite score gradient")
    scores = {key: state.layers[key[0]][key[1]].scores for key in sg}
    opt.step(scores, sg, lr)


def evaluate(logits: np.ndarray, labels: np.ndarray, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


# ---------------------------------------------------------------------------
# Search loops
# ---------------------------------------------------------------------------

EpochCallback = Callable[[int, ModelState, "object", dict], None]


def _search(spec: ModelSpec, g: Graph, splits: Splits, cfg: SearchConfig, state: ModelState | None,
            callback: EpochCallback | None, debug: bool) -> tuple[ModelState, RunRecord]:
    if state is None:
        state = init_model(spec, seed=cfg.seed, weight_init=cfg.weight_init)
    ops = Operators(g)
    opt = Adam(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    gradual = cfg.mode in ("ugts", "ugts_no_global")
    threshold = global_threshold if cfg.mode in ("ugts", "ugts_no_gradual") else layerwise_threshold
    sched = cfg.schedule
    record = RunRecord()
    start = time.perf_counter()
    for t in range(cfg.epochs):
        s_t = schedule_sparsity(t, sched) if gradual else sched.s_f
        threshold(state, s_t, spec)
        tape = ad.Tape(debug=debug)
        res = forward(state, spec, ops, tape)
        loss = ad.softmax_cross_entropy(res.logits, g.labels, splits.train_idx)
        if not np.isfinite(loss.data):
            raise ad.NumericFault(f"non-finite loss at epoch {t}")
        grads_by_leaf = ad.backward(tape, loss)
        grads = {key: grads_by_leaf[leaf] for key, leaf in res.leaves.items()
                 if key in _maskable_keys(state, spec)}
        logits = res.logits.data
        record.rows.append({
            "epoch": t,
            "train_loss": float(loss.data),
            "val_acc": evaluate(logits, g.labels, splits.val_idx),
            "test_acc": evaluate(logits, g.labels, splits.test_idx),
            "current_sparsity": effective_sparsity(state, spec),
            "wall_time": time.perf_counter() - start,
            "at_target": (not gradual) or t >= sched.end,
        })
        if callback is not None:
            callback(t, state, res, grads)
        score_step(state, grads, opt)
        tape.release()
    # schedule steps before s_f is reached are excluded from model selection
    record.select(lambda r: r["at_target"])
    return state, record


def _maskable_keys(state: ModelState, spec: ModelSpec) -> set:
    return {(l, name) for l, name, p in state.params() if name != "a" or spec.gat_mask_attention}


def ugts_search(spec: ModelSpec, g: Graph, splits: Splits, cfg: SearchConfig, state: ModelState | None = None,
                callback: EpochCallback | None = None, debug: bool = False) -> tuple[ModelState, RunRecord]:
    """Gradual, globally thresholded score search (or one of its ablations)."""
    if cfg.mode not in ("ugts", "ugts_no_global", "ugts_no_gradual"):
        raise ConfigError(f"ugts_search does not run mode {cfg.mode!r}")
    return _search(spec, g, splits, cfg, state, callback, debug)


def edge_popup_search(spec: ModelSpec, g: Graph, splits: Splits, cfg: SearchConfig, state: ModelState | None = None,
                      callback: EpochCallback | None = None, debug: bool = False) -> tuple[ModelState, RunRecord]:
    """Fixed-sparsity, per-layer thresholded score search."""
    if cfg.mode != "edge_popup":
        raise ConfigError(f"edge_popup_search runs mode 'edge_popup', got {cfg.mode!r}")
    return _search(spec, g, splits, cfg, state, callback, debug)


def run_search(spec, g, splits, cfg, **kw):
    fn = edge_popup_search if cfg.mode == "edge_popup" else ugts_search
    return fn(spec, g, splits, cfg, **kw)


# ---------------------------------------------------------------------------
# Dense baseline
# ---------------------------------------------------------------------------


def dense_defaults(depth: int) -> dict:
    """Baseline regularisation: the usual shallow setup, none for deep stacks."""
    if depth <= 2:
        return {"dropout": 0.5, "weight_decay": 5e-4}
    return {"dropout": 0.0, "weight_decay": 0.0}


def dense_train(spec: ModelSpec, g: Graph, splits: Splits, epochs: int = 400, lr: float = 0.01,
                weight_decay: float | None = None, dropout: float | None = None, seed: int = 0,
                weight_init: str = "xavier_uniform", callback: EpochCallback | None = None,
                debug: bool = False) -> tuple[ModelState, RunRecord]:
    """Full-batch Adam training of ``theta`` with all-ones masks."""
    d = dense_defaults(spec.depth)
    weight_decay = d["weight_decay"] if weight_decay is None else weight_decay
    dropout = d["dropout"] if dropout is None else dropout
    if not 0.0 <= dropout < 1.0:
        raise ConfigError("dropout must lie in [0, 1)")
    state = init_model(spec, seed=seed, weight_init=weight_init)
    ops = Operators(g)
    opt = Adam(lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 1])
    record = RunRecord()
    start = time.perf_counter()
    for t in range(epochs):
        tape = ad.Tape(debug=debug)
        res = forward(state, spec, ops, tape, dense=True, dropout=dropout, rng=rng)
        loss = ad.softmax_cross_entropy(res.logits, g.labels, splits.train_idx)
        if not np.isfinite(loss.data):
            raise ad.NumericFault(f"non-finite loss at epoch {t}")
        grads_by_leaf = ad.backward(tape, loss)
        grads = {key: grads_by_leaf[leaf] for key, leaf in res.leaves.items()}
        logits = res.logits.data if dropout == 0.0 else forward(state, spec, ops, dense=True).logits.data
        record.rows.append({
            "epoch": t,
            "train_loss": float(loss.data),
            "val_acc": evaluate(logits, g.labels, splits.val_idx),
            "test_acc": evaluate(logits, g.labels, splits.test_idx),
            "current_sparsity": 0.0,
            "wall_time": time.perf_counter() - start,
        })
        if callback is not None:
            callback(t, state, res, grads)
        for g_ in grads.values():
            if not np.all(np.isfinite(g_)):
                raise ad.NumericFault(f"non-finite weight gradient at epoch {t}")
        opt.step({key: state.layers[key[0]][key[1]].theta for key in grads}, grads)
        tape.release()
    record.select()
    record.extras["dense"] = True
    return state, record
