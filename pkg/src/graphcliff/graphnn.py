"""Molecular featurization and the GraphCliff network.

Each filter layer projects layer-normalized embeddings to width 3d, runs a
GINE step, splits the result into a long-range stream, a gate stream and a
local stream, diffuses the long-range stream with a Chebyshev recursion on
the normalized adjacency and adds the gated sum back onto the input.  A
self-attention top-k pool and an MLP head turn node embeddings into one
prediction per molecule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .chem import BondOrder, Molecule
from .tensor import Tensor

ELEMENT_SLOTS = ("C", "N", "O", "S", "F", "Cl", "Br", "I", "P", "B")
NODE_DIM = len(ELEMENT_SLOTS) + 1 + 6 + 5 + 1 + 5 + 1
EDGE_DIM = 5
FEATURE_VERSION = "graphcliff-features-v1"

_DEGREE_OFF = len(ELEMENT_SLOTS) + 1
_CHARGE_OFF = _DEGREE_OFF + 6
_AROM_OFF = _CHARGE_OFF + 5
_H_OFF = _AROM_OFF + 1
_RING_OFF = _H_OFF + 5


def featurize(mol: Molecule) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Node features (N, 29), directed edge index (2, 2E) and edge features (2E, 5)."""
    x = np.zeros((mol.n_atoms, NODE_DIM))
    for k, a in enumerate(mol.atoms):
        slot = ELEMENT_SLOTS.index(a.element) if a.element in ELEMENT_SLOTS else len(ELEMENT_SLOTS)
        x[k, slot] = 1.0
        x[k, _DEGREE_OFF + min(a.degree, 5)] = 1.0
        x[k, _CHARGE_OFF + min(max(a.formal_charge, -2), 2) + 2] = 1.0
        x[k, _AROM_OFF] = float(a.aromatic)
        x[k, _H_OFF + min(a.implicit_h, 4)] = 1.0
        x[k, _RING_OFF] = float(a.in_ring)
    n_bonds = len(mol.bonds)
    edge_index = np.zeros((2, 2 * n_bonds), dtype=np.int64)
    edge_attr = np.zeros((2 * n_bonds, EDGE_DIM))
    for b_idx, bond in enumerate(mol.bonds):
        feat = np.zeros(EDGE_DIM)
        feat[int(bond.order) - 1] = 1.0
        feat[4] = float(bond.in_ring)
        edge_index[:, 2 * b_idx] = (bond.begin, bond.end)
        edge_index[:, 2 * b_idx + 1] = (bond.end, bond.begin)
        edge_attr[2 * b_idx] = feat
        edge_attr[2 * b_idx + 1] = feat
    return x, edge_index, edge_attr


def normalized_adjacency(n: int, bonds: np.ndarray, self_loops: bool = True) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} for an undirected bond list of shape (E, 2)."""
    bonds = np.asarray(bonds, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([bonds[:, 0], bonds[:, 1]])
    cols = np.concatenate([bonds[:, 1], bonds[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    if self_loops:
        adj = adj + sp.identity(n, format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    d = sp.diags(inv_sqrt)
    return sp.csr_matrix(d @ adj @ d)


@dataclass
class GraphBatch:
    x: np.ndarray
    edge_index: np.ndarray
    edge_attr: np.ndarray
    graph_id: np.ndarray
    n_graphs: int
    bonds: np.ndarray
    norm_adj: sp.csr_matrix = field(repr=False)
    adj: sp.csr_matrix = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def collate(mols: Sequence[Molecule]) -> GraphBatch:
    """Stack molecules into one disconnected graph with block-diagonal adjacency."""
    xs, eis, eas, gids, bonds = [], [], [], [], []
    offset = 0
    for g, mol in enumerate(mols):
        if mol.n_atoms == 0:
            raise ValueError(f"molecule {g} has no atoms")
        x, ei, ea = featurize(mol)
        xs.append(x)
        eis.append(ei + offset)
        eas.append(ea)
        gids.append(np.full(mol.n_atoms, g, dtype=np.int64))
        bonds.append(mol.bond_array().reshape(-1, 2) + offset)
        offset += mol.n_atoms
    x = np.concatenate(xs) if xs else np.zeros((0, NODE_DIM))
    edge_index = np.concatenate(eis, axis=1) if eis else np.zeros((2, 0), dtype=np.int64)
    edge_attr = np.concatenate(eas) if eas else np.zeros((0, EDGE_DIM))
    bond_arr = np.concatenate(bonds).astype(np.int64) if bonds else np.zeros((0, 2), dtype=np.int64)
    n = x.shape[0]
    adj = sp.csr_matrix((np.ones(edge_index.shape[1]), (edge_index[1], edge_index[0])), shape=(n, n))
    graph_id = np.concatenate(gids) if gids else np.zeros(0, dtype=np.int64)
    return GraphBatch(x, edge_index, edge_attr, graph_id, len(mols), bond_arr, normalized_adjacency(n, bond_arr), adj)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    n_layers: int = 3
    cheb_order: int = 3
    pool_ratio: float = 0.5
    d_in: int = NODE_DIM
    d_edge: int = EDGE_DIM
    use_short: bool = True
    use_long: bool = True
    use_gate: bool = True
    short_filter: str = "gine"
    long_filter: str = "chebyshev"

    def __post_init__(self) -> None:
        for name in ("d", "n_layers", "d_in", "d_edge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cheb_order < 0:
            raise ValueError(f"cheb_order must be >= 0, got {self.cheb_order}")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ValueError(f"pool_ratio must be in (0, 1], got {self.pool_ratio}")
        if self.short_filter != "gine":
            raise NotImplementedError(f"short filter {self.short_filter!r} is not implemented")
        if self.long_filter != "chebyshev":
            raise NotImplementedError(f"long filter {self.long_filter!r} is not implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return cls(**data)


Params = dict[str, Tensor]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape, in canonical order."""
    d, w = cfg.d, 3 * cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.0.weight": (cfg.d_in, d),
        "encoder.0.bias": (d,),
        "encoder.1.weight": (d, d),
        "encoder.1.bias": (d,),
        "encoder.norm.weight": (d,),
        "encoder.norm.bias": (d,),
    }
    for layer in range(cfg.n_layers):
        p = f"filters.{layer}."
        shapes.update({
            p + "norm.weight": (d,),
            p + "norm.bias": (d,),
            p + "proj.weight": (d, w),
            p + "edge.weight": (cfg.d_edge, w),
            p + "edge.bias": (w,),
            p + "node.0.weight": (w, w),
            p + "node.0.bias": (w,),
            p + "node.1.weight": (w, w),
            p + "node.1.bias": (w,),
            p + "eps": (),
            p + "cheb": (cfg.cheb_order + 1,),
        })
    shapes.update({
        "pool.weight": (d, 1),
        "pool.bias": (1,),
        "head.0.weight": (2 * d, d),
        "head.0.bias": (d,),
        "head.1.weight": (d, 1),
        "head.1.bias": (1,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains, eps 0, alpha = e_0."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.weight"):
            out[name] = np.ones(shape)
        elif name.endswith(".cheb"):
            out[name] = np.zeros(shape)
            out[name][0] = 1.0
        elif name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[0])
            out[name] = rng.uniform(-bound, bound, size=shape)
        else:
            out[name] = np.zeros(shape)
    return out


def as_params(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad) for k, v in arrays.items()}


def param_count(arrays: dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in arrays.values()))


def _linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def atom_encode(x: Tensor, params: Params) -> Tensor:
    """relu(layernorm(MLP(x))) with a two-layer MLP."""
    if x.data.ndim != 2 or x.shape[1] != params["encoder.0.weight"].shape[0]:
        raise ValueError(f"atom_encode expects (N, {params['encoder.0.weight'].shape[0]}), got {x.shape}")
    h = T.relu(_linear(x, params, "encoder.0"))
    h = _linear(h, params, "encoder.1")
    h = T.layer_norm(h, params["encoder.norm.weight"], params["encoder.norm.bias"])
    return T.relu(h)


def chebyshev_propagate(x2: Tensor, norm_adj, alpha: Tensor) -> Tensor:
    """sum_k alpha_k T_k with T_0 = x2, T_1 = A x2, T_k = 2 A T_{k-1} - T_{k-2}."""
    order = alpha.shape[0] - 1
    if order < 0:
        raise ValueError("need at least one Chebyshev coefficient")
    prev = x2
    out = T.mul_scalar(x2, T.select(alpha, 0))
    if order == 0:
        return out
    cur = T.spmm(norm_adj, x2)
    out = T.add(out, T.mul_scalar(cur, T.select(alpha, 1)))
    for k in range(2, order + 1):
        prev, cur = cur, T.sub(T.scale(T.spmm(norm_adj, cur), 2.0), prev)
        out = T.add(out, T.mul_scalar(cur, T.select(alpha, k)))
    return out


def gine(z: Tensor, batch: GraphBatch, params: Params, prefix: str) -> Tensor:
    """psi((1 + eps) z_i + sum_j (z_j + phi(e_ij)))."""
    n = z.shape[0]
    neigh = T.spmm(batch.adj, z)
    if batch.edge_attr.shape[0]:
        msg = _linear(Tensor(batch.edge_attr), params, prefix + "edge")
        neigh = T.add(neigh, T.scatter_add(msg, batch.edge_index[1], n))
    self_term = T.add(z, T.mul_scalar(z, params[prefix + "eps"]))
    agg = T.add(self_term, neigh)
    hidden = T.relu(_linear(agg, params, prefix + "node.0"))
    return _linear(hidden, params, prefix + "node.1")


@dataclass
class FilterOutput:
    h: Tensor
    gate: Tensor
    long: Tensor


def graphcliff_filter(h: Tensor, batch: GraphBatch, params: Params, layer: int, cfg: ModelConfig) -> FilterOutput:
    """One GraphCliff layer: returns h + sigma(x1) * Long(x2) + v with its gate and long stream."""
    p = f"filters.{layer}."
    d = cfg.d
    if h.data.ndim != 2 or h.shape[1] != d:
        raise ValueError(f"filter expects (N, {d}), got {h.shape}")
    z = T.matmul(T.layer_norm(h, params[p + "norm.weight"], params[p + "norm.bias"]), params[p + "proj.weight"])
    if cfg.use_short:
        z = gine(z, batch, params, p)
    x2, x1, v = T.split(z, [d, d, d])
    long = chebyshev_propagate(x2, batch.norm_adj, params[p + "cheb"]) if cfg.use_long else x2
    gate = T.sigmoid(x1)
    mixed = T.mul(gate, long) if cfg.use_gate else long
    return FilterOutput(T.add(h, T.add(mixed, v)), gate, long)


@dataclass
class PoolOutput:
    readout: Tensor
    scores: Tensor
    kept: np.ndarray


def topk_per_graph(scores: np.ndarray, graph_id: np.ndarray, n_graphs: int, ratio: float) -> np.ndarray:
    """Indices of the top ceil(ratio * n_g) nodes per graph; ties go to the lower index."""
    kept = []
    for g in range(n_graphs):
        nodes = np.flatnonzero(graph_id == g)
        if len(nodes) == 0:
            raise ValueError(f"graph {g} has no nodes")
        k = max(1, math.ceil(ratio * len(nodes) - 1e-12))
        order = np.lexsort((nodes, -scores[nodes]))
        kept.append(np.sort(nodes[order[:k]]))
    return np.concatenate(kept)


def sagpool_readout(h: Tensor, batch: GraphBatch, params: Params, ratio: float) -> PoolOutput:
    """Score nodes with one normalized-adjacency propagation, keep the top fraction, read out mean || max."""
    n = h.shape[0]
    raw = _linear(T.spmm(batch.norm_adj, h), params, "pool")
    scores = T.reshape(raw, (n,))
    kept = topk_per_graph(scores.data, batch.graph_id, batch.n_graphs, ratio)
    h_kept = T.mul_rows(T.gather(h, kept), T.tanh(T.gather(scores, kept)))
    seg = batch.graph_id[kept]
    readout = T.concat([T.segment_mean(h_kept, seg, batch.n_graphs), T.segment_max(h_kept, seg, batch.n_graphs)])
    return PoolOutput(readout, scores, kept)


@dataclass
class LayerTrace:
    embeddings: list[np.ndarray]
    gates: list[np.ndarray]
    long: list[np.ndarray]
    pooled: np.ndarray
    kept: np.ndarray


def propagate(h0: Tensor, batch: GraphBatch, params: Params, cfg: ModelConfig) -> tuple[Tensor, list[FilterOutput]]:
    """Run the filter stack from given initial embeddings."""
    h = h0
    outs = []
    for layer in range(cfg.n_layers):
        out = graphcliff_filter(h, batch, params, layer, cfg)
        outs.append(out)
        h = out.h
    return h, outs


def model_forward(
    batch: GraphBatch, params: Params, cfg: ModelConfig, h0: Tensor | None = None
) -> tuple[Tensor, LayerTrace]:
    """Predictions (one per graph) and a trace of per-layer embeddings, gates and long-range outputs.

    ``h0`` replaces the atom encoder output when given, which lets diagnostics
    perturb the initial embeddings directly.
    """
    if h0 is None:
        h0 = atom_encode(Tensor(batch.x), params)
    h, outs = propagate(h0, batch, params, cfg)
    pool = sagpool_readout(h, batch, params, cfg.pool_ratio)
    hidden = T.relu(_linear(pool.readout, params, "head.0"))
    pred = T.reshape(_linear(hidden, params, "head.1"), (batch.n_graphs,))
    trace = LayerTrace(
        embeddings=[h0.data] + [o.h.data for o in outs],
        gates=[o.gate.data for o in outs],
        long=[o.long.data for o in outs],
        pooled=pool.readout.data,
        kept=pool.kept,
    )
    return pred, trace


def predict(mols: Sequence[Molecule], arrays: dict[str, np.ndarray], cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    params = as_params(arrays)
    out = []
    for start in range(0, len(mols), batch_size):
        pred, _ = model_forward(collate(mols[start:start + batch_size]), params, cfg)
        out.append(pred.data)
    return np.concatenate(out) if out else np.zeros(0)


def pooled_embeddings(mols: Sequence[Molecule], arrays: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Pooled graph readout vectors (n_mols, 2d)."""
    params = as_params(arrays)
    out = []
    for start in range(0, len(mols), 64):
        _, trace = model_forward(collate(mols[start:start + 64]), params, cfg)
        out.append(trace.pooled)
    return np.concatenate(out)
