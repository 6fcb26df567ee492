import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gblab.encoder import EncoderParams, LinearHead, init_params, logits, train_head
from gblab.evaluation import (
    CONTROLLED,
    UNCONTROLLED,
    EvalReport,
    FinetuneEvalConfig,
    ScenarioSpec,
    asr,
    asr_from_predictions,
    class_histogram,
    clean_accuracy,
    config_digest,
    persistence_eval,
    purify,
    trial_query_select,
    triggered_predictions,
    update_magnitude_histogram,
)
from gblab.graphcore import Graph, Rng, SbmSpec, gen_sbm
from gblab.prototypes import build_prototype_set, ego_embeddings
from gblab.trigger import AttackTrainConfig, init_generator, train_attack

D, H2 = 4, 6


def downstream(seed=0, nodes_per_class=8, p_in=0.6):
    spec = SbmSpec(num_domains=1, classes_per_domain=2, nodes_per_class=nodes_per_class,
                   p_in=p_in, p_out=0.05, feature_dim=D,
                   feature_centroid_scale=4.0, feature_noise=0.3)
    return gen_sbm(spec, Rng(seed))


def fitted(seed=0):
    graphs = downstream(seed)
    enc = init_params(D, 5, H2, Rng(seed + 50))
    emb, sources = ego_embeddings(enc, graphs, 3, 8)
    labels = np.array([graphs[g].labels[v] for g, v in sources])
    head = train_head(emb, labels, shots=4, rng=Rng(seed + 60), lr=1.0, epochs=300)
    nodes = [(graphs[g], v) for g, v in sources]
    return graphs, enc, head, nodes, labels


def test_clean_accuracy_separable_case():
    _, enc, head, nodes, _ = fitted(0)
    acc = clean_accuracy(enc, head, nodes, 3, 8)
    assert acc > 0.8


def test_clean_accuracy_shuffled_labels_near_chance():
    graphs, enc, head, nodes, labels = fitted(1)
    rng = np.random.default_rng(0)
    rates = []
    for _ in range(30):
        perm = rng.permutation(labels)
        rel = []
        for (g, v), lab in zip(nodes, perm):
            labs = np.full(g.num_nodes, -1)
            labs[v] = lab
            rel.append((Graph(g.X, g.A, labs, g.domain), v))
        rates.append(clean_accuracy(enc, head, rel, 3, 8))
    assert abs(np.mean(rates) - 0.5) < 0.15


def test_clean_accuracy_rejects_empty_or_unlabeled():
    _, enc, head, nodes, _ = fitted(2)
    with pytest.raises(ValueError):
        clean_accuracy(enc, head, [], 3, 8)
    g, v = nodes[0]
    bare = Graph(g.X, g.A, None, g.domain)
    with pytest.raises(ValueError):
        clean_accuracy(enc, head, [(bare, v)], 3, 8)


def test_asr_from_predictions_oracles():
    unc = ScenarioSpec(UNCONTROLLED)
    con = ScenarioSpec(CONTROLLED, target_class=1)
    preds = np.array([0, 0, 0, 1])
    assert asr_from_predictions(preds, unc) == 0.75
    assert asr_from_predictions(preds, con) == 0.25
    assert asr_from_predictions(np.array([1, 1]), con) == 1.0
    assert asr_from_predictions(np.array([0, 0]), con) == 0.0


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.integers(0, 4))
@settings(max_examples=50, deadline=None)
def test_controlled_never_exceeds_uncontrolled(preds, target):
    preds = np.array(preds)
    unc = asr_from_predictions(preds, ScenarioSpec(UNCONTROLLED))
    con = asr_from_predictions(preds, ScenarioSpec(CONTROLLED, target_class=target))
    assert con <= unc + 1e-12


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("weird").validate()
    with pytest.raises(ValueError):
        ScenarioSpec(CONTROLLED).validate()
    with pytest.raises(ValueError):
        ScenarioSpec(UNCONTROLLED, query_budget=0).validate()


def test_asr_runs_end_to_end_and_stays_in_range():
    graphs, enc, head, nodes, _ = fitted(3)
    gen = init_generator(D, H2, Rng(9))
    targets = np.random.default_rng(1).normal(size=(3, H2))
    rate = asr(enc, head, gen, nodes, ScenarioSpec(UNCONTROLLED, prototype_id=1),
               targets, 3, 8)
    assert 0.0 <= rate <= 1.0
    # uncontrolled rate can never drop below 1/C by definition of the max
    assert rate >= 0.5


def test_clean_predictions_unchanged_by_attack_training():
    graphs, enc, head, nodes, _ = fitted(4)
    emb, sources = ego_embeddings(enc, graphs, 3, 8)
    before = logits(head, emb).copy()
    gen = init_generator(D, H2, Rng(10))
    targets = np.random.default_rng(2).normal(size=(2, H2))
    train_attack(gen, enc, graphs, targets, None,
                 AttackTrainConfig(alpha=0.1, beta=0.0, epochs=2, lr=0.01),
                 Rng(11), min_size=3, max_size=8)
    emb2, _ = ego_embeddings(enc, graphs, 3, 8)
    assert np.array_equal(before, logits(head, emb2))


def test_purify_extremes():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 1.0  # orthogonal features: cos 0
    A[0, 2] = A[2, 0] = 1.0  # identical features: cos 1
    g = Graph(X, A)
    cleaned = purify(g, 0.1)
    assert cleaned.A[0, 1] == 0.0
    assert cleaned.A[0, 2] == 1.0
    assert cleaned.num_nodes == 3


def test_purify_boundary_is_strict():
    # edge kept when cosine equals the threshold exactly
    X = np.array([[6.0, 8.0], [8.0, 6.0]])  # cos = 96/100 = 0.96 exactly
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    g = Graph(X, A)
    assert purify(g, 0.96).A[0, 1] == 1.0
    assert purify(g, np.nextafter(0.96, 1.0)).A[0, 1] == 0.0


def test_purify_idempotent():
    rng = np.random.default_rng(3)
    W = (rng.random((8, 8)) < 0.5).astype(float)
    A = np.triu(W, 1) + np.triu(W, 1).T
    g = Graph(rng.normal(size=(8, 3)), A)
    once = purify(g, 0.1)
    twice = purify(once, 0.1)
    assert np.array_equal(once.A, twice.A)
    assert np.array_equal(once.X, twice.X)


def test_trial_query_single_aligned_prototype():
    graphs, enc, head, nodes, _ = fitted(5)
    gen = init_generator(D, H2, Rng(12))
    probe = nodes[:3]
    targets = np.random.default_rng(4).normal(size=(1, H2))
    preds = triggered_predictions(enc, head, gen, probe, targets[0], 3, 8)
    majority = int(np.bincount(preds).argmax())
    hit = trial_query_select(enc, head, gen, targets, majority, probe, budget=3,
                             min_size=3, max_size=8)
    assert hit.aligned and hit.prototype_id == 0
    assert hit.queries <= 3
    other = 1 - majority
    miss = trial_query_select(enc, head, gen, targets, other, probe, budget=3,
                              min_size=3, max_size=8)
    assert not miss.aligned
    assert miss.prototype_id is None


def test_trial_query_respects_budget():
    graphs, enc, head, nodes, _ = fitted(6)
    gen = init_generator(D, H2, Rng(13))
    targets = np.random.default_rng(5).normal(size=(4, H2))
    res = trial_query_select(enc, head, gen, targets, 0, nodes[:3], budget=5,
                             min_size=3, max_size=8)
    # budget 5 covers only one 3-probe round
    assert res.queries <= 3


def test_persistence_eval_zero_epochs_identity():
    graphs, enc, _, _, _ = fitted(7)
    gen = init_generator(D, H2, Rng(14))
    targets = np.random.default_rng(6).normal(size=(2, H2))
    cfg = FinetuneEvalConfig(lr=0.001, epochs=0, shots=3)
    out = persistence_eval(enc, gen, graphs, ScenarioSpec(UNCONTROLLED), targets,
                           cfg, Rng(15), 3, 8)
    assert out.asr_before == out.asr_after
    assert np.array_equal(out.params_before.W1, out.params_after.W1)


def test_persistence_eval_preserves_original_encoder():
    graphs, enc, _, _, _ = fitted(8)
    w1 = enc.W1.copy()
    gen = init_generator(D, H2, Rng(16))
    targets = np.random.default_rng(7).normal(size=(2, H2))
    cfg = FinetuneEvalConfig(lr=0.01, epochs=5, shots=3)
    out = persistence_eval(enc, gen, graphs, ScenarioSpec(UNCONTROLLED), targets,
                           cfg, Rng(17), 3, 8)
    assert np.array_equal(enc.W1, w1)
    assert 0.0 <= out.asr_before <= 1.0
    assert 0.0 <= out.asr_after <= 1.0
    # fine-tuning actually moved the copy
    assert not np.array_equal(out.params_after.W1, w1)


def test_update_histogram_trivial_cases():
    enc = init_params(D, 5, H2, Rng(18))
    counts, edges = update_magnitude_histogram(enc, enc, num_bins=4)
    assert counts[0] == enc.W1.size + enc.W2.size
    assert counts[1:].sum() == 0

    theta = enc.flatten()
    theta[3] += 0.5
    moved = enc.unflatten(theta)
    counts2, edges2 = update_magnitude_histogram(enc, moved, num_bins=4)
    assert counts2.sum() == theta.size
    assert counts2[-1] == 1  # the single delta sits in the top bin
    assert edges2[-1] == pytest.approx(0.5)


def test_update_histogram_rejects_layout_mismatch():
    a = init_params(D, 5, H2, Rng(19))
    b = init_params(D, 6, H2, Rng(19))
    with pytest.raises(ValueError):
        update_magnitude_histogram(a, b)


def test_eval_report_text_and_csv():
    rep = EvalReport(0.75, 0.5, 0.25, 0.5, np.array([5, 3]), seeds=(0, 1),
                     config_digest="abc123")
    text = rep.to_text()
    assert "asr 0.75\n" in text
    assert "class_histogram 5 3" in text
    assert "seeds 0 1" in text
    assert EvalReport.csv_header() == "seed,alpha,beta,scenario,asr,acc,asr_purified,asr_after_ft"
    row = rep.csv_row(2, 0.5, 0.25, UNCONTROLLED)
    assert row == "2,0.5,0.25,uncontrolled,0.75,0.5,0.25,0.5"
    with pytest.raises(ValueError):
        EvalReport(1.2, 0.5, 0.5, 0.5, np.array([1]))


def test_class_histogram_sums_to_test_size():
    preds = np.array([0, 2, 2, 1, 2])
    h = class_histogram(preds, 4)
    assert h.tolist() == [1, 1, 3, 0]
    assert h.sum() == preds.size


def test_config_digest_stable():
    a = config_digest({"x": 1, "y": "z"})
    b = config_digest({"y": "z", "x": 1})
    assert a == b and len(a) == 16
    assert config_digest({"x": 2, "y": "z"}) != a
