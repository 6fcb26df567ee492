import math

import numpy as np
import pytest

from gblab import autodiff as ad
from gblab.encoder import (
    EncoderParams,
    LinearHead,
    PretrainConfig,
    finetune,
    gcn_apply,
    gcn_forward,
    graph_embedding,
    init_params,
    node_embedding,
    nt_xent_loss,
    predict,
    predict_many,
    pretrain_contrastive,
    train_head,
)
from gblab.graphcore import Graph, Rng, ego_subgraph, gen_sbm, SbmSpec, sym_normalize


def small_graph(seed=0, n=8, d=3):
    rng = np.random.default_rng(seed)
    W = (rng.random((n, n)) < 0.4).astype(float)
    A = np.triu(W, 1) + np.triu(W, 1).T
    return Graph(rng.normal(size=(n, d)), A)


def test_zero_weights_give_zero_embeddings():
    g = small_graph()
    params = EncoderParams(np.zeros((3, 4)), np.zeros((4, 2)))
    z = gcn_forward(params, g)
    assert z.shape == (8, 2)
    assert np.array_equal(z.values, np.zeros((8, 2)))


def test_single_node_forward_matches_hand_formula():
    # one node, no edges: normalized adjacency is [[1]], so Z = relu(x W1) W2
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3))
    params = init_params(3, 4, 2, Rng(1))
    z = gcn_forward(params, Graph(x, np.zeros((1, 1))))
    expected = np.maximum(x @ params.W1, 0.0) @ params.W2
    assert np.allclose(z.values, expected, atol=1e-14)


def test_forward_rejects_dim_mismatch():
    params = init_params(5, 4, 2, Rng(0))
    with pytest.raises(ValueError):
        gcn_forward(params, small_graph(d=3))


def test_forward_gradients_pass_grad_check():
    g = small_graph(2, n=5, d=3)
    ahat = sym_normalize(g.A)
    params = init_params(3, 4, 2, Rng(2))
    # keep relu pre-activations away from zero so differences stay smooth
    x0 = g.X + 0.7

    def wrt_x(x):
        return ad.mean(gcn_apply(ahat, x, ad.constant(params.W1), ad.constant(params.W2)))

    def wrt_w1(w):
        return ad.mean(gcn_apply(ahat, ad.constant(x0), w, ad.constant(params.W2)))

    def wrt_w2(w):
        return ad.mean(gcn_apply(ahat, ad.constant(x0), ad.constant(params.W1), w))

    assert ad.grad_check(wrt_x, x0, eps=1e-5) < 1e-4
    assert ad.grad_check(wrt_w1, np.asarray(params.W1), eps=1e-5) < 1e-4
    assert ad.grad_check(wrt_w2, np.asarray(params.W2), eps=1e-5) < 1e-4


def test_node_and_graph_embedding_agree_on_single_node():
    params = init_params(2, 3, 3, Rng(3))
    g = Graph(np.array([[1.0, -0.5]]), np.zeros((1, 1)))
    assert np.allclose(node_embedding(params, g, 0), graph_embedding(params, g))


def test_node_embedding_equivariant_to_relabeling():
    g = small_graph(4, n=7)
    params = init_params(3, 4, 3, Rng(4))
    ref = node_embedding(params, g, 2)
    perm = np.array([2, 5, 0, 6, 1, 4, 3])  # node 2 goes to position 0
    gp = Graph(g.X[perm], g.A[np.ix_(perm, perm)])
    assert np.allclose(node_embedding(params, gp, 0), ref, atol=1e-12)


def test_graph_embedding_of_doubled_graph_unchanged():
    g = small_graph(5, n=6)
    params = init_params(3, 4, 3, Rng(5))
    n = g.num_nodes
    A2 = np.zeros((2 * n, 2 * n))
    A2[:n, :n] = g.A
    A2[n:, n:] = g.A
    doubled = Graph(np.vstack([g.X, g.X]), A2)
    assert np.allclose(graph_embedding(params, doubled), graph_embedding(params, g),
                       atol=1e-12)


def test_params_are_read_only():
    params = init_params(3, 4, 2, Rng(6))
    with pytest.raises(ValueError):
        params.W1[0, 0] = 5.0
    theta = params.flatten()
    assert theta.shape == (3 * 4 + 4 * 2,)
    back = params.unflatten(theta)
    assert np.array_equal(back.W1, params.W1)
    assert np.array_equal(back.W2, params.W2)


def test_nt_xent_identical_positives_orthogonal_negatives():
    # per-anchor loss is -log(e^2 / (e^2 + 2)) when the positive has cos 1,
    # both negatives cos 0, and temperature is 0.5
    E = ad.tensor(np.array([
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ]))
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 2.0))
    assert nt_xent_loss(E, 0.5).item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.2395, abs=5e-5)


def test_nt_xent_positive():
    rng = np.random.default_rng(0)
    E = ad.tensor(rng.normal(size=(6, 5)))
    assert nt_xent_loss(E, 0.5).item() > 0.0


def make_pool(seed=0):
    spec = SbmSpec(num_domains=1, classes_per_domain=2, nodes_per_class=20,
                   p_in=0.3, p_out=0.05, feature_dim=4)
    (g,) = gen_sbm(spec, Rng(seed))
    return [ego_subgraph(g, v, 1, 10)[0] for v in range(0, 40, 5)]


def test_pretrain_zero_epochs_returns_init():
    pool = make_pool()
    cfg = PretrainConfig(max_epochs=0)
    params, trace = pretrain_contrastive(pool, cfg, Rng(7), hidden1=8, hidden2=6)
    ref = init_params(4, 8, 6, Rng(7).child("init"))
    assert trace == []
    assert np.array_equal(params.W1, ref.W1)
    assert np.array_equal(params.W2, ref.W2)


def test_pretrain_reproducible_and_loss_positive():
    pool = make_pool(1)
    cfg = PretrainConfig(lr=0.01, max_epochs=5, batch=4)
    p1, t1 = pretrain_contrastive(pool, cfg, Rng(8), hidden1=8, hidden2=6)
    p2, t2 = pretrain_contrastive(pool, cfg, Rng(8), hidden1=8, hidden2=6)
    assert t1 == t2
    assert np.array_equal(p1.W1, p2.W1)
    assert all(v > 0.0 for v in t1)
    assert len(t1) == 5


def test_pretrain_early_stops_on_patience():
    pool = make_pool(2)
    # lr tiny enough that the loss barely moves; patience should cut it short
    cfg = PretrainConfig(lr=1e-12, max_epochs=500, patience=3, batch=4)
    _, trace = pretrain_contrastive(pool, cfg, Rng(9), hidden1=6, hidden2=4)
    assert len(trace) < 500


def test_train_head_separable_two_points():
    E = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    head = train_head(E, y, shots=1, rng=Rng(0), lr=1.0, epochs=400)
    assert predict(head, E[0]) == 0
    assert predict(head, E[1]) == 1


def test_train_head_identical_features_chance_accuracy():
    E = np.ones((6, 3))
    y = np.array([0, 0, 0, 1, 1, 1])
    head = train_head(E, y, shots=3, rng=Rng(1), epochs=50)
    preds = predict_many(head, E)
    # indistinguishable inputs: every logit row ties, argmax gives class 0
    assert np.array_equal(preds, np.zeros(6))
    assert float(np.mean(preds == y)) == pytest.approx(0.5)


def test_train_head_rejects_underfilled_class():
    E = np.eye(3)
    y = np.array([0, 0, 1])
    with pytest.raises(ValueError, match="class 1"):
        train_head(E, y, shots=2, rng=Rng(0))


def test_predict_tie_and_shift_invariance():
    head = LinearHead(np.zeros((2, 3)), np.zeros(3))
    assert predict(head, np.array([1.0, 2.0])) == 0
    shifted = LinearHead(np.zeros((2, 3)), np.full(3, 7.0))
    assert predict(shifted, np.array([1.0, 2.0])) == 0
    onehot = LinearHead(np.zeros((2, 3)), np.array([0.0, 1.0, 0.0]))
    assert predict(onehot, np.array([0.0, 0.0])) == 1


def test_finetune_zero_lr_is_identity():
    g = small_graph(6)
    g = Graph(g.X, g.A, labels=np.array([0, 1, 0, 1, -1, -1, 0, 1]))
    params = init_params(3, 4, 2, Rng(10))
    head = LinearHead(np.zeros((2, 2)), np.zeros(2))
    new_params, new_head, _ = finetune(params, [g], head, lr=0.0, epochs=3)
    assert np.array_equal(new_params.W1, params.W1)
    assert np.array_equal(new_head.W, head.W)


def test_finetune_descends_and_preserves_inputs():
    g = small_graph(7)
    labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    g = Graph(g.X, g.A, labels=labels)
    params = init_params(3, 4, 2, Rng(11))
    w1_before = params.W1.copy()
    head = LinearHead(np.zeros((2, 2)), np.zeros(2))
    _, _, trace = finetune(params, [g], head, lr=0.05, epochs=40)
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-10)  # monitored descent with a small step
    assert np.array_equal(params.W1, w1_before)  # original untouched


def test_finetune_requires_labels():
    params = init_params(3, 4, 2, Rng(12))
    head = LinearHead(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        finetune(params, [small_graph()], head, epochs=1)
