import numpy as np
import pytest

from ckgnn import autodiff as ad
from ckgnn.autodiff import Tensor, grad_check
from ckgnn.graph import Graph, SparseMatrix, normalized_adjacency
from ckgnn.kernel import ClassPartition, kernel_losses, total_loss
from ckgnn.models import MODEL_KINDS, AttentionHead, attention_matrix, build_model, gat_attention

from conftest import random_graph

SMALL = dict(hidden=4, heads=2, head_width=3, latent_z=3, encoder_depth=2)


def relu(a):
    return np.maximum(a, 0.0)


def softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def make_constant_encoder(model):
    w, b = model.kernel.encoder[-1]
    w.data[:] = 0.0
    b.data[:] = 0.25


def zero_attention(model):
    for h in model.heads:
        h.theta.data[:] = 0.0


def setup(rng, n=9, d=5, p=0.35):
    g = random_graph(rng, n, p)
    return normalized_adjacency(g), Tensor(rng.normal(size=(n, d)))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_outputs_are_row_stochastic(kind, rng):
    a_hat, x = setup(rng)
    model = build_model(kind, 5, 3, seed=1, **SMALL)
    proba = model.predict_proba(x, a_hat)
    assert proba.shape == (9, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_gcn_single_node_is_mlp(rng):
    model = build_model("gcn", 4, 3, seed=0, hidden=5)
    x = rng.normal(size=(1, 4))
    w0, w1 = (w.data for w in model.weights)
    a_hat = normalized_adjacency(Graph(1, []))
    np.testing.assert_allclose(model.predict_proba(x, a_hat), softmax(relu(x @ w0) @ w1), rtol=1e-14)


def test_gcn_matches_dense_formula(rng):
    a_hat, x = setup(rng)
    model = build_model("gcn", 5, 3, seed=2, hidden=6)
    w0, w1 = (w.data for w in model.weights)
    a = a_hat.to_dense()
    logits = a @ relu(a @ x.data @ w0) @ w1
    np.testing.assert_allclose(model.forward(x, a_hat).logits.data, logits, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_twin_nodes_get_identical_rows(kind, rng):
    a_hat = normalized_adjacency(Graph(2, [(0, 1)]))
    row = rng.normal(size=(1, 4))
    model = build_model(kind, 4, 3, seed=0, **SMALL)
    proba = model.predict_proba(np.vstack([row, row]), a_hat)
    np.testing.assert_array_equal(proba[0], proba[1])


# -- attention ------------------------------------------------------------

def test_self_loop_only_node_attends_to_itself(rng):
    a_hat = normalized_adjacency(Graph(3, [(0, 1)]))
    head = AttentionHead(Tensor(rng.normal(size=(4, 2))))
    t = attention_matrix(Tensor(rng.normal(size=(3, 4))), head, a_hat).to_dense()
    assert t[2, 2] == 1.0


def test_zero_theta_gives_uniform_attention(rng):
    a_hat = normalized_adjacency(random_graph(rng, 15, 0.3))
    head = AttentionHead(Tensor(np.zeros((4, 2))))
    t = gat_attention(Tensor(rng.normal(size=(15, 4))), head, a_hat).data[:, 0]
    deg = np.diff(a_hat.row_ptr)
    assert np.array_equal(t, 1.0 / np.repeat(deg, deg))


def test_attention_rows_sum_to_one(rng):
    for _ in range(10):
        a_hat = normalized_adjacency(random_graph(rng, 20, rng.uniform(0.05, 0.6)))
        head = AttentionHead(Tensor(rng.normal(scale=3.0, size=(3, 2))))
        t = attention_matrix(Tensor(rng.normal(size=(20, 3))), head, a_hat)
        np.testing.assert_allclose(t.row_sums(), 1.0, rtol=0, atol=1e-12)


def test_attention_scores_receiver_and_neighbour():
    a_hat = normalized_adjacency(Graph(2, [(0, 1)]))
    hw = Tensor([[1.0], [2.0]])
    t = attention_matrix(hw, AttentionHead(Tensor([[0.0, 1.0]])), a_hat).to_dense()
    # neighbour score only: row i gets softmax over leaky_relu(h_j) for j in {0, 1}
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(t, np.vstack([e / e.sum(), e / e.sum()]), rtol=1e-15)


def test_gat_uniform_attention_matches_mean_aggregation(rng):
    a_hat, x = setup(rng)
    model = build_model("gat", 5, 3, seed=0, heads=1, head_width=4)
    zero_attention(model)
    w0, w1 = (w.data for w in model.weights)
    pattern = (a_hat.to_dense() != 0).astype(float)
    mean = pattern / pattern.sum(axis=1, keepdims=True)
    logits = mean @ relu(mean @ x.data @ w0) @ w1
    np.testing.assert_allclose(model.forward(x, a_hat).logits.data, logits, rtol=1e-13, atol=1e-14)


def test_gat_hidden_width_is_heads_times_width():
    model = build_model("gat", 5, 3, seed=0, heads=4, head_width=6)
    assert model.weights[4].shape == (24, 3)
    ck = build_model("ckgat", 5, 3, seed=0, heads=4, head_width=6)
    assert ck.weights[4].shape == (48, 3)


def test_gat_output_heads_are_summed(rng):
    a_hat, x = setup(rng)
    model = build_model("gat", 5, 3, seed=0, heads=2, head_width=3, output_heads=3)
    out = model.forward(x, a_hat)
    assert len(out.attention) == 5 and out.logits.shape == (9, 3)


# -- composite-kernel models -----------------------------------------------

def test_ckgcn_unit_kernel_is_duplicated_gcn(rng):
    a_hat, x = setup(rng)
    model = build_model("ckgcn", 5, 3, seed=3, **SMALL)
    make_constant_encoder(model)
    out = model.forward(x, a_hat)
    np.testing.assert_array_equal(out.kernel.values.data, 1.0)
    w0, w1 = (w.data for w in model.weights)
    assert w1.shape == (8, 3)
    a = a_hat.to_dense()
    h = relu(np.hstack([a @ x.data @ w0, a @ x.data @ w0]))
    assert np.max(np.abs(out.logits.data - 2 * a @ h @ w1)) <= 1e-12


def test_ckgcn_matches_dense_formula(rng):
    a_hat, x = setup(rng)
    model = build_model("ckgcn", 5, 3, seed=4, **SMALL)
    out = model.forward(x, a_hat)
    k_hat = a_hat.with_values(out.composite[0].data[:, 0], symmetric=False).to_dense()
    w0, w1 = (w.data for w in model.weights)
    a = a_hat.to_dense()
    xw = x.data @ w0
    h = relu(np.hstack([k_hat @ xw, a @ xw]))
    np.testing.assert_allclose(out.logits.data, k_hat @ h @ w1 + a @ h @ w1, rtol=1e-12, atol=1e-13)


def test_ckgat_unit_kernel_branches_agree(rng):
    a_hat, x = setup(rng)
    model = build_model("ckgat", 5, 3, seed=5, **SMALL)
    make_constant_encoder(model)
    out = model.forward(x, a_hat)
    for t, km in zip(out.attention, out.composite):
        np.testing.assert_array_equal(km.data, t.data)
    # dense oracle from the attention matrices the model reports
    mats = [a_hat.with_values(t.data[:, 0], symmetric=False).to_dense() for t in out.attention]
    w = [p.data for p in model.weights]
    parts = []
    for m in range(2):
        agg = mats[m] @ x.data @ w[m]
        parts.append(relu(np.hstack([agg, agg])))
    h = np.hstack(parts)
    logits = 2 * mats[2] @ h @ w[2]
    assert np.max(np.abs(out.logits.data - logits)) <= 1e-12


def test_ckgat_two_cycle_composite_symmetric(rng):
    a_hat = normalized_adjacency(Graph(2, [(0, 1)]))
    model = build_model("ckgat", 3, 2, seed=0, heads=1, head_width=2, latent_z=2, encoder_depth=2)
    zero_attention(model)
    out = model.forward(Tensor(rng.normal(size=(2, 3))), a_hat)
    km = a_hat.with_values(out.composite[0].data[:, 0], symmetric=False).to_dense()
    np.testing.assert_array_equal(km, km.T)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_permutation_equivariance(kind, rng):
    g = random_graph(rng, 10, 0.35, weighted=True)
    x = rng.normal(size=(10, 5))
    perm = rng.permutation(10)
    inv = np.argsort(perm)
    g_perm = Graph(10, [(inv[i], inv[j], w) for i, j, w in g.edges])
    model = build_model(kind, 5, 3, seed=6, **SMALL)
    p0 = model.predict_proba(x, normalized_adjacency(g))
    p1 = model.predict_proba(x[perm], normalized_adjacency(g_perm))
    np.testing.assert_allclose(p1, p0[perm], rtol=0, atol=1e-12)


def test_wrong_node_count_rejected(rng):
    a_hat, _ = setup(rng)
    model = build_model("gcn", 5, 3, seed=0)
    with pytest.raises(ValueError):
        model.forward(Tensor(np.zeros((4, 5))), a_hat)


def test_state_dict_round_trip(rng):
    a_hat, x = setup(rng)
    m1 = build_model("ckgat", 5, 3, seed=1, **SMALL)
    m2 = build_model("ckgat", 5, 3, seed=2, **SMALL)
    m2.load_state_dict(m1.state_dict())
    np.testing.assert_array_equal(m1.predict_proba(x, a_hat), m2.predict_proba(x, a_hat))
    assert {p.name for p in m1.parameters()} >= {"W0.0", "theta1.0", "enc0.W", "dec1.b"}


def test_decay_excludes_encoder():
    model = build_model("ckgcn", 5, 3, seed=0, **SMALL)
    names = {p.name for p in model.decay_parameters()}
    assert names == {"W0", "W1"}


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_end_to_end_gradient(kind):
    rng = np.random.default_rng(0)
    n, d, c = 10, 6, 3
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
    a_hat = normalized_adjacency(Graph(n, edges))
    x = Tensor(rng.normal(size=(n, d)))
    labels = np.arange(n) % c
    mask = np.arange(n) < 7
    part = ClassPartition.from_labels(labels, mask)
    model = build_model(kind, d, c, seed=0, **SMALL)

    def loss():
        out = model.forward(x, a_hat)
        ce = ad.masked_cross_entropy(out.logits, labels, mask)
        if model.kernel is None:
            return ce
        kl = kernel_losses(x, out.z, out.x_bar, part, 1.0)
        return total_loss(ce, kl.kernel, kl.difference, 0.5, 0.1)

    rep = grad_check(loss, model.parameters(), n_coords=10**6)
    assert rep.kink_margin > 1e-3
    assert rep.max_rel_error <= 1e-4
