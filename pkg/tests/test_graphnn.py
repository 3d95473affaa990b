import numpy as np
import pytest

from graphcliff import tensor as T
from graphcliff.chem import parse_smiles
from graphcliff.graphnn import (
    EDGE_DIM,
    NODE_DIM,
    ModelConfig,
    as_params,
    atom_encode,
    chebyshev_propagate,
    collate,
    featurize,
    gine,
    graphcliff_filter,
    init_params,
    model_forward,
    normalized_adjacency,
    param_count,
    propagate,
    sagpool_readout,
    topk_per_graph,
)
from graphcliff.tensor import Tensor, grad_check

SMALL = ModelConfig(d=6, n_layers=2, cheb_order=3)


def random_params(cfg, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    arrs = init_params(cfg, seed)
    for k, v in arrs.items():
        if not k.endswith(".weight"):
            arrs[k] = rng.normal(size=v.shape) * scale
    return arrs


def random_graph(rng, n, p=0.4):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def dense_norm_adj(n, edges):
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def test_methane_features():
    x, ei, ea = featurize(parse_smiles("C"))
    assert x.shape == (1, NODE_DIM) and x.sum() == 4
    assert x[0, 0] == 1  # carbon slot
    assert ei.shape == (2, 0) and ea.shape == (0, EDGE_DIM)


def test_benzene_edge_features():
    _, ei, ea = featurize(parse_smiles("c1ccccc1"))
    assert ei.shape == (2, 12)
    assert np.all(ea == np.array([0, 0, 0, 1, 1]))


def test_directed_edges():
    _, ei, ea = featurize(parse_smiles("CCO"))
    assert ei.shape[1] == 4
    assert sorted(map(tuple, ei.T.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    assert np.array_equal(ea[0], ea[1])


def test_feature_clipping():
    x, _, _ = featurize(parse_smiles("[Si](C)(C)(C)C"))
    assert x[0, 10] == 1  # catch-all element slot
    x, _, _ = featurize(parse_smiles("[N-2]"))
    assert x[0, 17] == 1  # charge -2 slot
    assert np.all(x.sum(axis=1) >= 4)


def test_normalized_adjacency_entrywise():
    rng = np.random.default_rng(0)
    for n in range(1, 8):
        edges = random_graph(rng, n)
        assert np.allclose(normalized_adjacency(n, edges).toarray(), dense_norm_adj(n, edges), atol=1e-15)


def test_collate_block_diagonal():
    batch = collate([parse_smiles("CCO"), parse_smiles("c1ccccc1")])
    assert batch.n_nodes == 9 and batch.n_graphs == 2
    assert batch.graph_id.tolist() == [0] * 3 + [1] * 6
    dense = batch.norm_adj.toarray()
    assert np.all(dense[:3, 3:] == 0) and np.all(dense[3:, :3] == 0)
    assert np.all(batch.graph_id[batch.edge_index[0]] == batch.graph_id[batch.edge_index[1]])


def test_atom_encode_empty_and_rows():
    params = as_params(init_params(SMALL))
    assert atom_encode(Tensor(np.zeros((0, NODE_DIM))), params).shape == (0, 6)
    x = np.random.default_rng(1).random((1, NODE_DIM))
    out = atom_encode(Tensor(np.vstack([x, x])), params).data
    assert np.array_equal(out[0], out[1])
    with pytest.raises(ValueError):
        atom_encode(Tensor(np.zeros((2, 3))), params)


def test_atom_encode_gradient():
    arrs = random_params(SMALL, 2)
    x = np.random.default_rng(2).random((4, NODE_DIM))
    names = [k for k in arrs if k.startswith("encoder")]

    def f(xt, *ps):
        params = {**as_params(arrs), **dict(zip(names, ps))}
        return T.sum_all(T.tanh(atom_encode(xt, params)))

    assert grad_check(f, [x] + [arrs[k] for k in names]).passed


def test_chebyshev_single_node():
    alpha = np.array([0.5, 1.0, -2.0, 3.0])
    x = np.array([[1.0, -2.0]])
    out = chebyshev_propagate(Tensor(x), np.array([[1.0]]), Tensor(alpha)).data
    assert np.allclose(out, alpha.sum() * x)


def test_chebyshev_two_node_path():
    adj = dense_norm_adj(2, [(0, 1)])
    x = np.array([[1.0], [0.0]])
    for k, expected in enumerate([[1, 0], [0.5, 0.5], [0, 1]]):
        alpha = np.zeros(3)
        alpha[k] = 1.0
        assert np.allclose(chebyshev_propagate(Tensor(x), adj, Tensor(alpha)).data.ravel(), expected, atol=1e-15)


def test_chebyshev_identity_coefficients():
    x = np.random.default_rng(3).normal(size=(5, 3))
    adj = dense_norm_adj(5, [(0, 1), (1, 2), (3, 4)])
    assert np.array_equal(chebyshev_propagate(Tensor(x), adj, Tensor(np.array([1.0, 0, 0, 0]))).data, x)


def dense_chebyshev(adj, x, alpha):
    n = adj.shape[0]
    mats = [np.eye(n), adj]
    while len(mats) < len(alpha):
        mats.append(2 * adj @ mats[-1] - mats[-2])
    return sum(a * m for a, m in zip(alpha, mats)) @ x


def test_chebyshev_matches_dense_polynomial():
    rng = np.random.default_rng(4)
    for _ in range(25):
        n = int(rng.integers(1, 9))
        edges = random_graph(rng, n)
        alpha = rng.normal(size=int(rng.integers(1, 6)))
        x = rng.normal(size=(n, 3))
        got = chebyshev_propagate(Tensor(x), normalized_adjacency(n, edges), Tensor(alpha)).data
        assert np.max(np.abs(got - dense_chebyshev(dense_norm_adj(n, edges), x, alpha))) < 1e-10


def test_chebyshev_needs_coefficient():
    with pytest.raises(ValueError):
        chebyshev_propagate(Tensor(np.ones((1, 1))), np.eye(1), Tensor(np.zeros(0)))


def test_gine_isolated_node_identity():
    cfg = ModelConfig(d=2, n_layers=1)
    arrs = init_params(cfg)
    arrs["filters.0.node.0.weight"] = np.eye(6)
    arrs["filters.0.node.1.weight"] = np.eye(6)
    arrs["filters.0.edge.weight"] = np.zeros((EDGE_DIM, 6))
    z = np.abs(np.random.default_rng(5).normal(size=(1, 6)))
    out = gine(Tensor(z), collate([parse_smiles("C")]), as_params(arrs), "filters.0.")
    assert np.allclose(out.data, z, atol=1e-15)


def test_zero_filter_is_identity():
    cfg = ModelConfig(d=4, n_layers=1)
    arrs = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    batch = collate([parse_smiles("CC(=O)Nc1ccccc1")])
    h = np.random.default_rng(6).normal(size=(batch.n_nodes, 4))
    assert np.array_equal(graphcliff_filter(Tensor(h), batch, as_params(arrs), 0, cfg).h.data, h)


def test_zero_gate_stream_halves_long_output():
    cfg = ModelConfig(d=3, n_layers=1, cheb_order=2)
    arrs = random_params(cfg, 7)
    arrs["filters.0.node.1.weight"][:, 3:6] = 0.0
    arrs["filters.0.node.1.bias"][3:6] = 0.0
    batch = collate([parse_smiles("CCOC")])
    h = np.random.default_rng(7).normal(size=(4, 3))
    out = graphcliff_filter(Tensor(h), batch, as_params(arrs), 0, cfg)
    assert np.all(out.gate.data == 0.5)
    # recompute v from the unchanged value stream
    params = as_params(arrs)
    z = T.matmul(T.layer_norm(Tensor(h), params["filters.0.norm.weight"], params["filters.0.norm.bias"]),
                 params["filters.0.proj.weight"])
    v = gine(z, batch, params, "filters.0.").data[:, 6:]
    assert np.allclose(out.h.data, h + 0.5 * out.long.data + v, atol=1e-13)


def test_filter_gradient():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(d=4, n_layers=1, cheb_order=3)
    arrs = random_params(cfg, 8)
    batch = collate([parse_smiles("CC1CC(O)C1")])
    assert batch.n_nodes == 6
    h = rng.normal(size=(6, 4))
    names = [k for k in arrs if k.startswith("filters.0")]

    def f(ht, *ps):
        params = {**as_params(arrs), **dict(zip(names, ps))}
        return T.sum_all(graphcliff_filter(ht, batch, params, 0, cfg).h)

    assert grad_check(f, [h] + [arrs[k] for k in names]).passed


def test_topk_ties_prefer_lower_index():
    kept = topk_per_graph(np.array([1.0, 2.0, 2.0, 2.0, 0.5]), np.array([0, 0, 0, 0, 1]), 2, 0.5)
    assert kept.tolist() == [1, 2, 4]


def test_pool_single_node():
    cfg = ModelConfig(d=3, n_layers=1)
    params = as_params(random_params(cfg, 9))
    batch = collate([parse_smiles("C")])
    h = np.array([[0.3, -1.0, 2.0]])
    out = sagpool_readout(Tensor(h), batch, params, 0.5)
    s = out.scores.data[0]
    assert out.kept.tolist() == [0]
    assert np.allclose(out.readout.data, np.tile(h * np.tanh(s), 2))


def test_pool_ratio_one_keeps_all():
    cfg = ModelConfig(d=3, n_layers=1)
    batch = collate([parse_smiles("CCO"), parse_smiles("CCCCC")])
    h = np.random.default_rng(10).normal(size=(8, 3))
    out = sagpool_readout(Tensor(h), batch, as_params(random_params(cfg)), 1.0)
    assert out.kept.tolist() == list(range(8))


def test_pool_graphs_independent():
    cfg = ModelConfig(d=3, n_layers=1)
    params = as_params(random_params(cfg, 11))
    rng = np.random.default_rng(11)
    batch = collate([parse_smiles("CCOCC"), parse_smiles("c1ccccc1")])
    h = rng.normal(size=(11, 3))
    a = sagpool_readout(Tensor(h), batch, params, 0.5).readout.data
    h2 = h.copy()
    h2[5:] = rng.normal(size=(6, 3))
    b = sagpool_readout(Tensor(h2), batch, params, 0.5).readout.data
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[1], b[1])


def test_single_atom_forward():
    pred, trace = model_forward(collate([parse_smiles("C")]), as_params(random_params(SMALL)), SMALL)
    assert pred.shape == (1,) and np.isfinite(pred.data).all()
    assert len(trace.embeddings) == SMALL.n_layers + 1


def test_gate_range_and_trace():
    batch = collate([parse_smiles("CC(=O)Nc1ccc(O)cc1")])
    _, trace = model_forward(batch, as_params(random_params(SMALL, 3, scale=2.0)), SMALL)
    for g in trace.gates:
        assert np.all((g > 0) & (g < 1))


def permute_smiles_graph(mol, perm):
    from graphcliff.chem import Bond, Molecule

    inv = np.argsort(perm)
    atoms = tuple(mol.atoms[k] for k in perm)
    bonds = tuple(Bond(int(inv[b.begin]), int(inv[b.end]), b.order, b.in_ring) for b in mol.bonds)
    return Molecule(atoms, bonds)


def test_permutation_invariance():
    rng = np.random.default_rng(12)
    params = as_params(random_params(SMALL, 12))
    for smiles in ["CC(=O)Nc1ccc(O)cc1", "CN1CCC(CC1)c1ccccc1F", "OC(=O)CCc1ccccn1"]:
        mol = parse_smiles(smiles)
        base, trace = model_forward(collate([mol]), params, SMALL)
        for _ in range(3):
            perm = rng.permutation(mol.n_atoms)
            pred, _ = model_forward(collate([permute_smiles_graph(mol, perm)]), params, SMALL)
            assert abs(pred.data[0] - base.data[0]) < 1e-9


def test_batch_equals_separate():
    params = as_params(random_params(SMALL, 13))
    mols = [parse_smiles("CCN(CC)C(=O)c1ccccc1"), parse_smiles("O=C1CCCN1")]
    joint, _ = model_forward(collate(mols), params, SMALL)
    apart = [model_forward(collate([m]), params, SMALL)[0].data[0] for m in mols]
    assert np.max(np.abs(joint.data - apart)) < 1e-10


def test_end_to_end_gradient():
    cfg = ModelConfig(d=4, n_layers=2, cheb_order=3)
    arrs = random_params(cfg, 14)
    batch = collate([parse_smiles("CCO"), parse_smiles("C1CC1")])
    assert batch.n_nodes == 6 and batch.n_graphs == 2
    names = list(arrs)

    def f(*ps):
        pred, _ = model_forward(batch, dict(zip(names, ps)), cfg)
        return T.mse(pred, np.array([0.3, -0.2]))

    report = grad_check(f, [arrs[k] for k in names])
    assert report.passed, str(report)


def _final_change(cfg, arrs, mol, source):
    batch = collate([mol])
    params = as_params(arrs)
    h0 = np.random.default_rng(0).normal(size=(mol.n_atoms, cfg.d))
    base, _ = propagate(Tensor(h0), batch, params, cfg)
    pert = h0.copy()
    # a random direction, since layer norm ignores a uniform shift of a row
    pert[source] += 1e-3 * np.random.default_rng(1).normal(size=cfg.d)
    out, _ = propagate(Tensor(pert), batch, params, cfg)
    return np.linalg.norm(out.data - base.data, axis=1)


def test_receptive_field():
    mol = parse_smiles("CCCCCC")
    long_cfg = ModelConfig(d=4, n_layers=1, cheb_order=3)
    change = _final_change(long_cfg, random_params(long_cfg, 15), mol, 0)
    assert change[3] > 1e-8
    plain = ModelConfig(d=4, n_layers=1, cheb_order=3, use_long=False, use_gate=False)
    change = _final_change(plain, random_params(plain, 15), mol, 0)
    assert change[1] > 1e-8 and np.all(change[2:] == 0)


def test_config_validation_and_stubs():
    with pytest.raises(ValueError):
        ModelConfig(d=0)
    with pytest.raises(ValueError):
        ModelConfig(pool_ratio=0.0)
    with pytest.raises(NotImplementedError):
        ModelConfig(short_filter="gat")
    with pytest.raises(NotImplementedError):
        ModelConfig(long_filter="gcn")


def test_init_conventions():
    cfg = ModelConfig()
    arrs = init_params(cfg, 0)
    assert arrs["filters.0.cheb"].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert arrs["filters.1.eps"] == 0.0
    assert np.all(arrs["head.0.bias"] == 0)
    w = arrs["filters.2.proj.weight"]
    assert w.shape == (128, 384) and np.max(np.abs(w)) <= 1 / np.sqrt(128)
    assert param_count(arrs) > 0
