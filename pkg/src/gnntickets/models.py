"""Masked GCN, GIN and GAT models over frozen random weights.

Every linear map (and the GAT attention vector) is a :class:`MaskedParam`:
a frozen weight ``theta``, a trainable ``scores`` array and a binary
``mask``. The forward pass only ever sees ``theta * mask``; that product is
the tape leaf whose gradient drives both the straight-through score updates
and the per-layer gradient-norm diagnostics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import CsrMatrix, Tape, Tensor
from .graph import Graph

ARCHS = ("GCN", "GIN", "GAT")
WEIGHT_INITS = ("kaiming_uniform", "signed_constant", "xavier_uniform")


@dataclass(eq=False)
class MaskedParam:
    theta: np.ndarray
    scores: np.ndarray
    mask: np.ndarray
    fan_in: int

    @property
    def size(self) -> int:
        return self.theta.size

    def effective(self) -> np.ndarray:
        return self.theta * self.mask


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    depth: int
    width: int
    in_dim: int
    out_dim: int
    leaky_slope: float = 0.2
    gat_mask_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arch", self.arch.upper())
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")

    def dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(sizes[:-1], sizes[1:]))


@dataclass
class ModelState:
    """Per-layer parameter sets, in forward order.

    GCN layers hold ``W``; GIN layers ``W1`` and ``W2``; GAT layers ``W``
    and the attention vector ``a`` (destination half first).
    """

    layers: list[dict[str, MaskedParam]]
    seed: int = 0
    weight_init: str = "kaiming_uniform"

    def params(self):
        """Yield ``(layer, name, param)`` in flat-index order."""
        for l, layer in enumerate(self.layers):
            for name, p in layer.items():
                yield l, name, p

    def maskable(self, spec: ModelSpec | None = None) -> list[MaskedParam]:
        return [p for l, name, p in self.params() if _is_maskable(spec, name)]

    def copy(self) -> ModelState:
        layers = [{k: MaskedParam(p.theta.copy(), p.scores.copy(), p.mask.copy(), p.fan_in)
                   for k, p in layer.items()} for layer in self.layers]
        return ModelState(layers, self.seed, self.weight_init)


def _is_maskable(spec: ModelSpec | None, name: str) -> bool:
    return not (name == "a" and spec is not None and not spec.gat_mask_attention)


def _draw(rng: np.random.Generator, shape, fan_in: int, fan_out: int, kind: str) -> np.ndarray:
    if kind == "kaiming_uniform":
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if kind == "signed_constant":
        return np.sqrt(2.0 / fan_in) * np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    if kind == "xavier_uniform":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown weight_init {kind!r}; expected one of {WEIGHT_INITS}")


def init_model(spec: ModelSpec, seed: int = 0, weight_init: str = "kaiming_uniform") -> ModelState:
    """Random frozen weights, ``|kaiming_uniform|`` scores and all-ones masks."""
    rng = np.random.default_rng(seed)
    layers = []

    def param(shape, fan_in, fan_out):
        theta = _draw(rng, shape, fan_in, fan_out, weight_init)
        scores = np.abs(_draw(rng, shape, fan_in, fan_out, "kaiming_uniform"))
        return MaskedParam(theta, scores, np.ones(shape), fan_in)

    for d_in, d_out in spec.dims():
        if spec.arch == "GCN":
            layers.append({"W": param((d_in, d_out), d_in, d_out)})
        elif spec.arch == "GIN":
            layers.append({"W1": param((d_in, d_out), d_in, d_out),
                           "W2": param((d_out, d_out), d_out, d_out)})
        else:
            # each half of a is dotted with a d_out-dimensional projection
            layers.append({"W": param((d_in, d_out), d_in, d_out),
                           "a": param((2 * d_out,), d_out, 1)})
    return ModelState(layers, seed, weight_init)


def effective_sparsity(state: ModelState, spec: ModelSpec | None = None) -> float:
    ps = state.maskable(spec)
    total = sum(p.size for p in ps)
    kept = sum(int(np.count_nonzero(p.mask)) for p in ps)
    return 1.0 - kept / total


# ---------------------------------------------------------------------------
# Propagation operators
# ---------------------------------------------------------------------------


def normalize_adjacency(g: Graph) -> CsrMatrix:
    """Symmetric GCN propagation matrix ``D^-1/2 (A + I) D^-1/2``."""
    a = g.adjacency + sp.identity(g.n_nodes, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(d)
    return CsrMatrix.from_scipy(sp.diags(inv) @ a @ sp.diags(inv))


def self_loop_adjacency(g: Graph) -> CsrMatrix:
    """``A + I`` (GIN sum aggregation with epsilon 0, GAT neighbourhoods)."""
    return CsrMatrix.from_scipy(g.adjacency + sp.identity(g.n_nodes, format="csr"))


class Operators:
    """Graph operators shared by every forward pass over one graph."""

    def __init__(self, g: Graph):
        self.norm_adj = normalize_adjacency(g)
        self.loop_adj = self_loop_adjacency(g)
        x = sp.csr_matrix(g.features)
        self.features = CsrMatrix.from_scipy(x)
        self.loop_features = CsrMatrix.from_scipy(self.loop_adj.to_scipy() @ x)
        self.n_nodes = g.n_nodes


def _input_matmul(x, ops: Operators, w: Tensor) -> Tensor:
    # first layer multiplies the constant (typically very sparse) feature matrix
    if x is None:
        return ad.spmm(ops.features, w)
    return ad.matmul(x, w)


@dataclass
class ForwardResult:
    logits: Tensor
    activations: list[Tensor]
    leaves: dict[tuple[int, str], Tensor] = field(default_factory=dict)


def forward(state: ModelState, spec: ModelSpec, g: Graph | Operators, tape: Tape | None = None,
            dense: bool = False, dropout: float = 0.0, rng: np.random.Generator | None = None) -> ForwardResult:
    """Run the model and return logits, every layer's output and the weight leaves.

    With ``dense=False`` the leaves are ``theta * mask``; with ``dense=True``
    they are ``theta`` itself (dense training baseline). Dropout, if any, is
    applied to the hidden activations between layers.
    """
    ops = g if isinstance(g, Operators) else Operators(g)
    if spec.in_dim != ops.features.shape[1]:
        raise ad.ShapeError(f"model expects {spec.in_dim} features, graph has {ops.features.shape[1]}")
    tape = tape if tape is not None else Tape()
    leaves: dict[tuple[int, str], Tensor] = {}

    def weight(l, name, p: MaskedParam) -> Tensor:
        if dense or not _is_maskable(spec, name):
            value = p.theta
        else:
            value = p.effective()
        t = tape.leaf(value, name=f"{l}.{name}")
        leaves[(l, name)] = t
        return t

    h = None
    acts = []
    last = spec.depth - 1
    for l, layer in enumerate(state.layers):
        if l > 0 and dropout > 0.0:
            h = ad.dropout(h, dropout, rng)
        if spec.arch == "GCN":
            z = _input_matmul(h, ops, weight(l, "W", layer["W"]))
            h = ad.spmm(ops.norm_adj, z)
        elif spec.arch == "GIN":
            w1 = weight(l, "W1", layer["W1"])
            first = ad.spmm(ops.loop_features, w1) if h is None else ad.matmul(ad.spmm(ops.loop_adj, h), w1)
            mid = ad.relu(first)
            h = ad.matmul(mid, weight(l, "W2", layer["W2"]))
        else:
            h = _gat_layer(h, ops, weight(l, "W", layer["W"]), weight(l, "a", layer["a"]), spec.leaky_slope)
        if l < last:
            h = ad.relu(h)
        acts.append(h)
    return ForwardResult(h, acts, leaves)


def _gat_layer(h, ops: Operators, w: Tensor, a: Tensor, slope: float) -> Tensor:
    adj = ops.loop_adj
    z = _input_matmul(h, ops, w)
    d = w.shape[1]
    # a^T [z_i || z_j] split into destination and source halves
    s_dst = ad.matmul(z, _column(a, 0, d))
    s_src = ad.matmul(z, _column(a, d, 2 * d))
    e = ad.add(_flat(ad.take_rows(s_dst, adj.rows)), _flat(ad.take_rows(s_src, adj.col_idx)))
    alpha = ad.edge_softmax(ad.leaky_relu(e, slope), adj)
    return ad.weighted_spmm(adj, alpha, z)


def _column(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` as a column vector."""
    n = a.shape[0]
    idx = np.arange(start, stop)

    def vjp(g):
        out = np.zeros(n)
        out[idx] = g[:, 0]
        return (out,)

    return ad._emit(a.data[start:stop, None], (a,), vjp)


def _flat(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (g.reshape(shape),)

    return ad._emit(x.data.reshape(-1), (x,), vjp)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def write_tensor(path, arr: np.ndarray) -> None:
    """Shape header (``<u4`` ndim, then ``<u8`` dims) followed by little-endian float64 data."""
    arr = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header declares {shape}, found {data.size} values")
    return data.reshape(shape).astype(np.float64)


def save_checkpoint(state: ModelState, spec: ModelSpec, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for l, name, p in state.params():
        for kind in ("theta", "scores", "mask"):
            fn = f"layer{l}.{name}.{kind}.bin"
            write_tensor(d / fn, getattr(p, kind))
            files.append(fn)
    meta = {"format_version": CHECKPOINT_VERSION, "spec": asdict(spec), "seed": state.seed,
            "weight_init": state.weight_init,
            "params": [[l, name, p.fan_in] for l, name, p in state.params()], "files": files}
    if extra:
        meta.update(extra)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory) -> tuple[ModelState, ModelSpec, dict]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    spec = ModelSpec(**meta["spec"])
    layers: list[dict[str, MaskedParam]] = [{} for _ in range(spec.depth)]
    for l, name, fan_in in meta["params"]:
        arrs = [read_tensor(d / f"layer{l}.{name}.{kind}.bin") for kind in ("theta", "scores", "mask")]
        layers[l][name] = MaskedParam(*arrs, fan_in=fan_in)
    return ModelState(layers, meta["seed"], meta["weight_init"]), spec, meta
