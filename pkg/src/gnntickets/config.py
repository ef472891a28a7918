"""Declarative experiment configuration (INI-style ``.cfg`` files).

Example::

    [data]
    format = linqs
    path = data/cora
    row_normalize = true

    [model]
    arch = GAT
    depth = 2
    width = 256

    [search]
    method = ugts, edge_popup
    sparsity = 0.9, 0.95
    seeds = 0, 1, 2, 3, 4

Any key holding a comma-separated list becomes a sweep axis where the
field is a list. Relative data paths resolve against the config file's
directory, then the working directory, then ``$UGT_DATA_DIR``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .graph import resolve_data_path
from .models import ARCHS, WEIGHT_INITS
from .search import MODES, ConfigError

METHODS = MODES + ("dense",)
FORMATS = ("linqs", "bundle", "synth")


@dataclass
class ExperimentConfig:
    data_format: str = "linqs"
    data_path: str = ""
    row_normalize: bool = False
    per_class: int = 20
    n_val: int = 500
    n_test: int = 1000
    split_seed: int = 0
    synth_nodes: int = 300
    synth_classes: int = 3
    synth_features: int = 16
    synth_intra_p: float = 0.05
    synth_inter_p: float = 0.005
    synth_seed: int = 0

    archs: list[str] = field(default_factory=lambda: ["GCN"])
    depths: list[int] = field(default_factory=lambda: [2])
    widths: list[int] = field(default_factory=lambda: [256])
    weight_init: str = "kaiming_uniform"
    gat_mask_attention: bool = True
    leaky_slope: float = 0.2

    methods: list[str] = field(default_factory=lambda: ["ugts"])
    sparsities: list[float] = field(default_factory=lambda: [0.9])
    epochs: int = 400
    lr: float = 0.01
    weight_decay: float = 0.0
    s_i: float = 0.0
    t_0: int = 0
    delta_t: int = 1
    n: int = 200
    seeds: list[int] = field(default_factory=lambda: [0])

    dense_epochs: int = 400
    dense_lr: float = 0.01
    dense_weight_decay: float | None = None
    dense_dropout: float | None = None
    dense_weight_init: str = "xavier_uniform"

    mad: bool = False
    mad_every: int = 1
    mad_max_nodes: int = 1000
    grad_norms: bool = False
    ood: bool = False
    ood_holdout: float = 0.4
    robustness: bool = False
    perturb_kind: str = "feature"
    fractions: list[float] = field(default_factory=lambda: [0.0])
    eval_only: bool = False
    embeddings: bool = False
    embedding_layers: list[int] = field(default_factory=list)
    checkpoints: bool = False

    output_dir: str = "runs"
    source: str = ""
    base_dir: str = "."

    def resolved_data_path(self) -> Path:
        return resolve_data_path(self.data_path, self.base_dir)

    def config_hash(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()


# (section, key) -> field name
_KEYS = {
    ("data", "format"): "data_format",
    ("data", "path"): "data_path",
    ("data", "row_normalize"): "row_normalize",
    ("data", "per_class"): "per_class",
    ("data", "n_val"): "n_val",
    ("data", "n_test"): "n_test",
    ("data", "split_seed"): "split_seed",
    ("data", "synth_nodes"): "synth_nodes",
    ("data", "synth_classes"): "synth_classes",
    ("data", "synth_features"): "synth_features",
    ("data", "synth_intra_p"): "synth_intra_p",
    ("data", "synth_inter_p"): "synth_inter_p",
    ("data", "synth_seed"): "synth_seed",
    ("model", "arch"): "archs",
    ("model", "depth"): "depths",
    ("model", "width"): "widths",
    ("model", "weight_init"): "weight_init",
    ("model", "gat_mask_attention"): "gat_mask_attention",
    ("model", "leaky_slope"): "leaky_slope",
    ("search", "method"): "methods",
    ("search", "sparsity"): "sparsities",
    ("search", "epochs"): "epochs",
    ("search", "lr"): "lr",
    ("search", "weight_decay"): "weight_decay",
    ("search", "s_i"): "s_i",
    ("search", "t_0"): "t_0",
    ("search", "delta_t"): "delta_t",
    ("search", "n"): "n",
    ("search", "seeds"): "seeds",
    ("dense", "epochs"): "dense_epochs",
    ("dense", "lr"): "dense_lr",
    ("dense", "weight_decay"): "dense_weight_decay",
    ("dense", "dropout"): "dense_dropout",
    ("dense", "weight_init"): "dense_weight_init",
    ("analysis", "mad"): "mad",
    ("analysis", "mad_every"): "mad_every",
    ("analysis", "mad_max_nodes"): "mad_max_nodes",
    ("analysis", "grad_norms"): "grad_norms",
    ("analysis", "ood"): "ood",
    ("analysis", "ood_holdout"): "ood_holdout",
    ("analysis", "robustness"): "robustness",
    ("analysis", "perturb_kind"): "perturb_kind",
    ("analysis", "fractions"): "fractions",
    ("analysis", "eval_only"): "eval_only",
    ("analysis", "embeddings"): "embeddings",
    ("analysis", "embedding_layers"): "embedding_layers",
    ("analysis", "checkpoints"): "checkpoints",
    ("output", "dir"): "output_dir",
}

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(name: str, raw: str):
    kind = _TYPES[name]
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if kind.startswith("list"):
        inner = kind[5:-1]
        conv = {"int": int, "float": float, "str": str}[inner]
        return [conv(s) for s in items]
    if raw.strip().lower() in ("none", "") and "None" in kind:
        return None
    if kind == "bool":
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw.strip()


def parse_config(path) -> ExperimentConfig:
    """Parse a config file; raises :class:`ConfigError` on unknown keys or bad values."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, base_dir=path.parent)


def parse_config_text(text: str, base_dir=".") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            name = _KEYS.get((section, key))
            if name is None:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                values[name] = _convert(name, raw)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
    cfg = ExperimentConfig(**values, source=text, base_dir=str(base_dir))
    cfg.archs = [a.upper() for a in cfg.archs]
    return cfg


def config_problems(cfg: ExperimentConfig) -> list[str]:
    """Every invariant violation found without running anything."""
    out = []
    if cfg.data_format not in FORMATS:
        out.append(f"unknown data format {cfg.data_format!r}; expected one of {FORMATS}")
    elif cfg.data_format != "synth":
        if not cfg.data_path:
            out.append("[data] path is required")
        elif not cfg.resolved_data_path().exists():
            out.append(f"dataset path not found: {cfg.data_path}")
    for name in ("archs", "depths", "widths", "methods", "sparsities", "seeds", "fractions"):
        if not getattr(cfg, name):
            out.append(f"sweep list {name} is empty")
    out += [f"unknown arch {a!r}" for a in cfg.archs if a not in ARCHS]
    out += [f"unknown method {m!r}; expected one of {METHODS}" for m in cfg.methods if m not in METHODS]
    out += [f"depth must be >= 1, got {d}" for d in cfg.depths if d < 1]
    out += [f"width must be >= 1, got {w}" for w in cfg.widths if w < 1]
    for s in cfg.sparsities:
        if not cfg.s_i <= s < 1.0:
            out.append(f"sparsity {s} outside [s_i={cfg.s_i}, 1)")
    if cfg.n < 1 or cfg.delta_t < 1:
        out.append("schedule needs n >= 1 and delta_t >= 1")
    if any(m != "dense" for m in cfg.methods) and cfg.epochs < cfg.t_0 + cfg.n * cfg.delta_t:
        out.append(f"epochs={cfg.epochs} is shorter than the schedule "
                   f"(t_0 + n * delta_t = {cfg.t_0 + cfg.n * cfg.delta_t})")
    if cfg.lr <= 0 or cfg.dense_lr <= 0:
        out.append("learning rates must be positive")
    for w in (cfg.weight_init, cfg.dense_weight_init):
        if w not in WEIGHT_INITS:
            out.append(f"unknown weight_init {w!r}")
    if cfg.perturb_kind not in ("feature", "edge"):
        out.append(f"perturb_kind must be 'feature' or 'edge', got {cfg.perturb_kind!r}")
    out += [f"fraction {f} outside [0, 1]" for f in cfg.fractions if not 0.0 <= f <= 1.0]
    if cfg.ood and not 0.0 < cfg.ood_holdout < 1.0:
        out.append("ood_holdout must lie in (0, 1)")
    if cfg.mad_every < 1:
        out.append("mad_every must be >= 1")
    for l in cfg.embedding_layers:
        if any(not 0 <= l < d for d in cfg.depths):
            out.append(f"embedding layer {l} outside some model depth")
    return out
