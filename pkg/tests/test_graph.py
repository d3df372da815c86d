import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablequant import tensor as T
from stablequant.graph import (GCNNonSym, GCNSym, Graph, GraphOperator, NodeClassifier,
                               gcn_specs, node_classifier_loss, read_edge_list, write_edge_list)
from stablequant.layers import BlockSpec, build_network
from stablequant.stability import operator_norm
from stablequant.tensor import Tensor

from conftest import numeric_grad


def single_edge():
    return GraphOperator(Graph(2, np.array([[0, 1]])), normalize=False)


def block(cls, op, c=1, h=0.5, quant=False, seed=0):
    spec = BlockSpec(cls.kind, c, c, h=h, quant_weights=quant, quant_acts=quant)
    return cls(spec, np.random.default_rng(seed), op)


def random_graph(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < rng.uniform(0.05, 0.5)
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    if len(edges) == 0:
        edges = np.array([[0, 1]])
    return Graph(n, edges)


def fwd(b, x):
    with T.no_grad():
        return b(Tensor(np.asarray(x, dtype=float))).data


def test_unnormalized_single_edge():
    np.testing.assert_array_equal(single_edge().S.toarray(), [[-1.0, 1.0]])


def test_sym_hand_example():
    b = block(GCNSym, single_edge())
    b.K.freeze(np.ones((1, 1)))
    np.testing.assert_array_equal(fwd(b, [[0.0], [1.0]]).ravel(), [0.5, 0.5])


def test_nonsym_hand_example():
    b = block(GCNNonSym, single_edge())
    b.K1.freeze(np.ones((1, 1)))
    b.K2.freeze(np.full((1, 1), 2.0))
    np.testing.assert_array_equal(fwd(b, [[0.0], [1.0]]).ravel(), [1.0, 0.0])


def test_zero_kernel_is_identity():
    op = GraphOperator(random_graph(np.random.default_rng(0), 10))
    x = np.random.default_rng(1).standard_normal((op.shape[1], 3))
    for cls in (GCNSym, GCNNonSym):
        b = block(cls, op, c=3)
        for k in b.kernels():
            k.freeze(np.zeros((3, 3)))
        np.testing.assert_array_equal(fwd(b, x), x)


def test_constant_features_on_regular_graph_unchanged():
    ring = Graph(6, np.array([[i, (i + 1) % 6] for i in range(6)]))
    b = block(GCNSym, GraphOperator(ring), c=2, seed=4)
    x = np.tile([0.7, -1.1], (6, 1))
    np.testing.assert_allclose(fwd(b, x), x, rtol=0, atol=1e-15)


def test_tied_nonsym_is_bit_identical_to_sym():
    rng = np.random.default_rng(5)
    op = GraphOperator(random_graph(rng, 30))
    sym, non = block(GCNSym, op, c=4, seed=1), block(GCNNonSym, op, c=4, seed=2)
    K = sym.K.effective()
    non.K1.freeze(K)
    non.K2.freeze(K.T)
    x = rng.standard_normal((op.shape[1], 4))
    np.testing.assert_array_equal(fwd(sym, x), fwd(non, x))


def test_kernel_counts():
    op = single_edge()
    assert len(block(GCNSym, op, c=4).kernels()) == 1
    assert len(block(GCNNonSym, op, c=4).kernels()) == 2


def test_normalized_laplacian_norm_at_most_two():
    rng = np.random.default_rng(6)
    for _ in range(20):
        op = GraphOperator(random_graph(rng))
        L = (op.ST @ op.S).toarray()
        assert np.linalg.eigvalsh(L)[-1] <= 2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_incidence_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    op = GraphOperator(random_graph(rng))
    x = rng.standard_normal((op.shape[1], 3))
    y = rng.standard_normal((op.shape[0], 3))
    lhs, rhs = np.vdot(op.apply(x), y), np.vdot(x, op.adjoint(y))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_sym_block_non_expansive_random_graphs():
    rng = np.random.default_rng(7)
    violations = 0
    for trial in range(1000):
        op = GraphOperator(random_graph(rng))
        c = int(rng.integers(1, 5))
        K = rng.standard_normal((c, c)) * rng.uniform(0.1, 3.0)
        nrm = operator_norm((lambda v: op.apply(v @ K.T), lambda u: op.adjoint(u) @ K),
                            (op.shape[1], c), seed=trial)
        b = block(GCNSym, op, c=c, h=0.9 * 2 / nrm**2)
        b.K.freeze(K)
        x = rng.standard_normal((op.shape[1], c)) * rng.uniform(0.1, 5)
        eta = rng.standard_normal(x.shape) * 10.0 ** rng.uniform(-4, 1)
        d = np.linalg.norm(fwd(b, x + eta) - fwd(b, x))
        violations += d > np.linalg.norm(eta) + 1e-10
    assert violations == 0


def test_feature_width_mismatch_rejected():
    b = block(GCNSym, single_edge(), c=3)
    with pytest.raises(ValueError):
        fwd(b, np.zeros((2, 4)))


def test_node_classifier_examples():
    head = NodeClassifier(BlockSpec("classifier", 3, 4), np.random.default_rng(0))
    head.b.data = np.zeros(4)
    with T.no_grad():
        logits = head(Tensor(np.zeros((5, 3))))
    np.testing.assert_array_equal(logits.data, np.zeros((5, 4)))
    z = Tensor(np.random.default_rng(1).standard_normal((4, 3)))
    labels = np.array([0, 2, 1, 1])
    mask = np.array([False, False, True, False])
    single = T.cross_entropy(Tensor(z.data[2:3]), labels[2:3]).item()
    assert node_classifier_loss(z, labels, mask).item() == pytest.approx(single, abs=1e-15)
    with pytest.raises(ValueError):
        node_classifier_loss(z, labels, np.zeros(4, dtype=bool))


def test_graph_validation():
    with pytest.raises(ValueError):
        Graph(3, np.array([[0, 3]]))
    with pytest.raises(ValueError):
        Graph(3, np.array([[1, 1]]))
    with pytest.raises(ValueError):
        Graph(3, np.array([[0, 1], [1, 0]]))
    assert Graph(4, np.array([[0, 1], [2, 3]])).components() == 2


def test_edge_list_round_trip(tmp_path):
    edges = np.array([[0, 4], [1, 2], [3, 4]])
    write_edge_list(tmp_path / "e.txt", edges)
    np.testing.assert_array_equal(read_edge_list(tmp_path / "e.txt"), edges)


def test_gcn_network_gradients():
    g = random_graph(np.random.default_rng(8), 12)
    feats = np.random.default_rng(9).standard_normal((g.n, 5))
    labels = np.arange(g.n) % 3
    mask = np.arange(g.n) % 2 == 0
    for arch in ("gcn_sym", "gcn_nonsym"):
        net = build_network(gcn_specs(arch, 2, 5, 4, 3, quantize=False), seed=1, task="graph",
                            graph=GraphOperator(g))

        def loss():
            return node_classifier_loss(net(Tensor(feats)), labels, mask)

        net.zero_grad()
        loss().backward()
        for name, p in net.named_parameters():
            if p.grad is None:
                continue

            def f(v, p=p):
                old, p.data = p.data, v
                with T.no_grad():
                    out = float(loss().data)
                p.data = old
                return out

            num = numeric_grad(f, np.array(p.data, dtype=float))
            scale = max(np.abs(num).max(), 1e-12)
            rel = np.abs(p.grad - num) / np.maximum(np.abs(num), 1e-3 * scale)
            assert rel.max() <= 1e-5, (arch, name)
