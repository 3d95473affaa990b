"""Diagnostics over a frozen model: hop sensitivity, Dirichlet energy, Jacobian
spectral norm, embedding-vs-fingerprint distance slope and gate scores."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import shortest_path

from . import tensor as T
from .chem import Molecule
from .cliff import CliffPair
from .fingerprint import FpConfig, ecfp, tanimoto
from .graphnn import as_params, atom_encode, collate, graphcliff_filter, model_forward, pooled_embeddings, propagate
from .tensor import Tensor
from .train import Checkpoint

log = logging.getLogger(__name__)


def hop_distances(mol: Molecule) -> np.ndarray:
    """All-pairs shortest path lengths on the bond graph; unreachable pairs are -1."""
    batch = collate([mol])
    dist = shortest_path(batch.adj, method="D", unweighted=True, directed=False)
    return np.where(np.isfinite(dist), dist, -1).astype(np.int64)


def hop_sensitivity(
    ckpt: Checkpoint, mol: Molecule, eps: float = 1e-3, k_max: int = 5, trials: int = 8, seed: int = 0
) -> dict[int, float]:
    """Mean ||h_v(perturbed) - h_v|| / eps at the final layer, grouped by hop distance d(u, v).

    The perturbation is ``eps`` times a random unit vector added to node u's
    initial embedding (the atom encoder output).  Hops with no node pair are
    left out of the result.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    cfg = ckpt.model_config
    params = as_params(ckpt.params)
    batch = collate([mol])
    h0 = atom_encode(Tensor(batch.x), params).data
    base, _ = propagate(Tensor(h0), batch, params, cfg)
    dist = hop_distances(mol)
    rng = np.random.default_rng(seed)
    sums = np.zeros(k_max + 1)
    counts = np.zeros(k_max + 1)
    for _ in range(trials):
        for u in range(mol.n_atoms):
            direction = rng.normal(size=cfg.d)
            direction /= np.linalg.norm(direction)
            pert = h0.copy()
            pert[u] += eps * direction
            out, _ = propagate(Tensor(pert), batch, params, cfg)
            change = np.linalg.norm(out.data - base.data, axis=1) / eps
            for k in range(k_max + 1):
                mask = dist[u] == k
                if mask.any():
                    sums[k] += change[mask].mean()
                    counts[k] += 1
    return {k: float(sums[k] / counts[k]) for k in range(k_max + 1) if counts[k]}


def mean_hop_sensitivity(ckpt: Checkpoint, mols: Sequence[Molecule], **kwargs) -> dict[int, float]:
    """Unweighted mean over molecules of per-molecule hop sensitivities."""
    acc: dict[int, list[float]] = {}
    for mol in mols:
        for k, v in hop_sensitivity(ckpt, mol, **kwargs).items():
            acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def dirichlet_energy(h: np.ndarray, edges: np.ndarray) -> float:
    """Sum over undirected edges (i, j) of ||h_i - h_j||^2."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return 0.0
    diff = h[edges[:, 0]] - h[edges[:, 1]]
    return float(np.sum(diff * diff))


def layer_dirichlet(ckpt: Checkpoint, mols: Sequence[Molecule]) -> list[float]:
    """Mean Dirichlet energy over molecules for h^0 .. h^L."""
    params = as_params(ckpt.params)
    per_layer = np.zeros(ckpt.model_config.n_layers + 1)
    for mol in mols:
        batch = collate([mol])
        _, trace = model_forward(batch, params, ckpt.model_config)
        per_layer += [dirichlet_energy(h, batch.bonds) for h in trace.embeddings]
    return (per_layer / max(len(mols), 1)).tolist()


@dataclass(frozen=True)
class SingularValueEstimate:
    value: float
    converged: bool
    iterations: int


def jacobian_top_singular(
    layer_fn: Callable[[Tensor], Tensor],
    x: np.ndarray,
    iters: int = 100,
    tol: float = 1e-8,
    delta: float = 1e-6,
    seed: int = 0,
) -> SingularValueEstimate:
    """Largest singular value of the Jacobian of ``layer_fn`` at ``x`` by power iteration on J^T J.

    J v comes from a forward difference with step ``delta``; J^T u from the
    reverse-mode tape.  Iteration stops once successive estimates agree to
    ``tol`` relatively; otherwise the last estimate is returned unconverged.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=x.shape)
    v /= np.linalg.norm(v)
    fx = layer_fn(Tensor(x)).data
    prev = None
    sigma = 0.0
    for it in range(1, iters + 1):
        jv = (layer_fn(Tensor(x + delta * v)).data - fx) / delta
        w = T.vjp(layer_fn, x, jv)
        lam = float(np.vdot(v, w))
        sigma = float(np.sqrt(max(lam, 0.0)))
        norm = np.linalg.norm(w)
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite Jacobian product")
        if norm == 0:
            return SingularValueEstimate(0.0, True, it)
        v = w / norm
        if prev is not None and abs(sigma - prev) <= tol * max(sigma, 1e-300):
            return SingularValueEstimate(sigma, True, it)
        prev = sigma
    return SingularValueEstimate(sigma, False, iters)


def layer_jacobian_singular(ckpt: Checkpoint, mol: Molecule, **kwargs) -> list[SingularValueEstimate]:
    """Top Jacobian singular value of each filter layer at the molecule's actual layer inputs."""
    cfg = ckpt.model_config
    params = as_params(ckpt.params)
    batch = collate([mol])
    _, trace = model_forward(batch, params, cfg)
    out = []
    for layer in range(cfg.n_layers):
        def fn(h, layer=layer):
            return graphcliff_filter(h, batch, params, layer, cfg).h

        out.append(jacobian_top_singular(fn, trace.embeddings[layer], **kwargs))
    return out


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    x: tuple[float, ...] = field(repr=False)
    y: tuple[float, ...] = field(repr=False)


def _minmax(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    return np.zeros_like(v) if span == 0 else (v - v.min()) / span


def normalized_slope(x: Sequence[float], y: Sequence[float]) -> SlopeFit:
    """OLS line (with intercept) after min-max scaling x and y separately to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("need at least two (x, y) points of equal length")
    if np.ptp(x) == 0:
        raise ValueError("all x values identical; slope undefined")
    xn, yn = _minmax(x), _minmax(y)
    fit = stats.linregress(xn, yn)
    return SlopeFit(float(fit.slope), float(fit.intercept), tuple(xn), tuple(yn))


def embedding_vs_ecfp_slope(
    ckpt: Checkpoint, mols: Sequence[Molecule], pairs: Sequence[CliffPair | tuple[int, int]], fp: FpConfig | None = None
) -> SlopeFit:
    """Slope of pooled-embedding distance against ECFP dissimilarity over the given index pairs."""
    idx = sorted({k for p in pairs for k in ((p.i, p.j) if isinstance(p, CliffPair) else p)})
    pos = {k: n for n, k in enumerate(idx)}
    emb = pooled_embeddings([mols[k] for k in idx], ckpt.params, ckpt.model_config)
    fps = {k: ecfp(mols[k], fp) for k in idx}
    xs, ys = [], []
    for p in pairs:
        i, j = (p.i, p.j) if isinstance(p, CliffPair) else p
        xs.append(1.0 - tanimoto(fps[i], fps[j]))
        ys.append(float(np.linalg.norm(emb[pos[i]] - emb[pos[j]])))
    return normalized_slope(xs, ys)


def export_gate_scores(ckpt: Checkpoint, mol: Molecule, layer: int = -1) -> np.ndarray:
    """Per-atom mean gate value at ``layer``, min-max scaled over the molecule (constant -> 0.5)."""
    n_layers = ckpt.model_config.n_layers
    if not -n_layers <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for {n_layers} layers")
    _, trace = model_forward(collate([mol]), as_params(ckpt.params), ckpt.model_config)
    raw = trace.gates[layer].mean(axis=1)
    span = raw.max() - raw.min()
    if span <= 1e-15 * max(1.0, abs(raw.max())):
        return np.full_like(raw, 0.5)
    return (raw - raw.min()) / span


@dataclass
class AnalysisReport:
    hop_sensitivity: dict[int, float]
    dirichlet: list[float]
    jacobian_sv: list[float]
    jacobian_converged: list[bool]
    slope: float | None
    intercept: float | None
    gate_scores: list[list[float]]
    pair_x: list[float] = field(default_factory=list)
    pair_y: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hop_sensitivity"] = {str(k): v for k, v in self.hop_sensitivity.items()}
        return d


def analyze(
    ckpt: Checkpoint,
    mols: Sequence[Molecule],
    pairs: Sequence[CliffPair] = (),
    k_max: int = 5,
    trials: int = 8,
    eps: float = 1e-3,
    seed: int = 0,
    fp: FpConfig | None = None,
) -> AnalysisReport:
    """Run every diagnostic over ``mols``; Jacobian values are the per-layer maximum over molecules."""
    hops = mean_hop_sensitivity(ckpt, mols, eps=eps, k_max=k_max, trials=trials, seed=seed)
    energy = layer_dirichlet(ckpt, mols)
    sv = np.zeros(ckpt.model_config.n_layers)
    converged = [True] * ckpt.model_config.n_layers
    for mol in mols:
        for layer, est in enumerate(layer_jacobian_singular(ckpt, mol, seed=seed)):
            sv[layer] = max(sv[layer], est.value)
            converged[layer] = converged[layer] and est.converged
    slope = intercept = None
    px: list[float] = []
    py: list[float] = []
    if len(pairs) >= 2:
        try:
            fit = embedding_vs_ecfp_slope(ckpt, mols, pairs, fp)
            slope, intercept, px, py = fit.slope, fit.intercept, list(fit.x), list(fit.y)
        except ValueError as exc:
            log.warning("slope skipped: %s", exc)
    gates = [export_gate_scores(ckpt, m).tolist() for m in mols]
    return AnalysisReport(hops, energy, sv.tolist(), converged, slope, intercept, gates, px, py)
