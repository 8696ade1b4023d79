import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipgrepair.attacks import fgsm_batch
from ipgrepair.errors import ConfigurationError, DomainError
from ipgrepair.ipg import IPG, EdgeTable, NodeId, extract_corpus
from ipgrepair.structural import (
    Attribution,
    AttributionSummary,
    GnnModel,
    LayeredAggregator,
    SparseAggregator,
    attribute,
    batch_from_ipgs,
    gnn_forward,
    gnn_logits,
    gnn_loss_and_grads,
    graph_batch,
    _edge_endpoints,
    influential_sets,
    node_input_x_gradient,
    load_gnn,
    load_influential,
    occlusion_scores_bruteforce,
    occlusion_scores_layered,
    read_attribution_csv,
    save_gnn,
    save_influential,
    train_gnn,
    write_attribution_csv,
)
from oracles import central_diff, max_rel_error


def _gnn(hidden=3, k=2, seed=0):
    return GnnModel.init([f"s{i}" for i in range(k)], hidden, seed)


def _zero_gnn(hidden=3, k=2):
    g = _gnn(hidden, k)
    for name in g.PARAMS:
        getattr(g, name)[...] = 0
    return g


def _reference_logits(gnn, x, edges):
    """Loop-based message passing over an explicit neighbour list."""
    n = len(x)
    nbrs = [{i} for i in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    h = np.asarray(x, dtype=float)[:, None]
    for W, b in ((gnn.W1, gnn.b1), (gnn.W2, gnn.b2)):
        h = np.array([np.maximum(np.mean([h[j] for j in sorted(nbrs[i])], axis=0) @ W + b, 0)
                      for i in range(n)])
    return h.mean(axis=0) @ gnn.Wc + gnn.bc


def test_uniform_for_isolated_node_with_zero_weights():
    p = gnn_forward(_zero_gnn(k=3), graph_batch([2.5], [], []))
    assert np.allclose(p, 1 / 3, atol=0, rtol=1e-15)


def test_uniform_for_zero_features():
    g = _gnn(k=4, seed=3)
    g.b1[:] = g.b2[:] = g.bc[:] = 0
    p = gnn_forward(g, graph_batch(np.zeros(5), [0, 1, 2], [1, 2, 3]))
    assert np.allclose(p, 0.25, rtol=1e-15)


def test_two_node_path_hand_value():
    g = _gnn(hidden=1)
    g.W1[:] = 0.5
    g.b1[:] = 0
    g.W2[:] = 2.0
    g.b2[:] = -1.0
    g.Wc[:] = [[1.0, -1.0]]
    g.bc[:] = 0
    # both nodes average (1 + 3) / 2 = 2 -> h1 = 1 -> h2 = 1 -> logits (1, -1)
    p = gnn_forward(g, graph_batch([1.0, 3.0], [0], [1]))
    assert p[0] == pytest.approx(1 / (1 + math.exp(-2)), rel=1e-12)


def test_single_node_chain_rule():
    g = _gnn(hidden=1)
    w1, w2, c = 0.7, 1.3, -0.4
    g.W1[:] = w1
    g.W2[:] = w2
    g.Wc[:] = [[c, 0.2]]
    g.b1[:] = g.b2[:] = g.bc[:] = 0
    ipg = IPG("m", "0", "s0", 0, [0], [0], [2.0], [1], edge_table=EdgeTable.empty())
    a = attribute(g, ipg, "s0")
    assert a.node_scores[NodeId(0, 0)] == pytest.approx(abs(2.0 * c * w2 * w1), rel=1e-12)


def test_zero_feature_zero_score():
    g = _gnn(hidden=4, seed=1)
    batch = graph_batch([0.0, 0.5, 1.0], [0, 1], [2, 2])
    assert node_input_x_gradient(g, batch, 0)[0] == 0.0


def test_unknown_target():
    with pytest.raises(DomainError):
        _gnn().class_index("nope")


def test_empty_graph():
    with pytest.raises(DomainError):
        graph_batch([], [], [])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_loop_reference_and_probability(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    m = int(rng.integers(0, 2 * n))
    src, dst = rng.integers(0, n, m), rng.integers(0, n, m)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    x = rng.random(n)
    g = _gnn(hidden=4, k=3, seed=seed)
    logits = gnn_logits(g, graph_batch(x, src, dst))[0]
    assert np.allclose(logits, _reference_logits(g, x, list(zip(src, dst))), atol=1e-12)
    p = gnn_forward(g, graph_batch(x, src, dst))
    assert abs(p.sum() - 1) < 1e-9
    # relabel the nodes
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    p2 = gnn_forward(g, graph_batch(x[perm], inv[src], inv[dst]))
    assert np.allclose(p, p2, atol=1e-12)


def _fd_gnn(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    src = rng.integers(0, n, 2 * n)
    dst = rng.integers(0, n, 2 * n)
    x = rng.uniform(0.2, 1.5, n)
    gnn = _gnn(hidden=int(rng.integers(2, 6)), k=3, seed=seed)
    gnn.b1[:] = rng.normal(0, 0.1, gnn.b1.shape)
    gnn.b2[:] = rng.normal(0, 0.1, gnn.b2.shape)
    label = [int(rng.integers(3))]
    batch = graph_batch(x, src, dst)
    _, grads, dx = gnn_loss_and_grads(gnn, batch, label)
    errs = []
    for name in gnn.PARAMS:
        p = getattr(gnn, name)

        def f(v, p=p):
            old = p.copy()
            p[...] = v
            out = gnn_loss_and_grads(gnn, batch, label)[0]
            p[...] = old
            return out

        errs.append(max_rel_error(grads[name], central_diff(f, p.copy())))
    errs.append(max_rel_error(dx, central_diff(
        lambda v: gnn_loss_and_grads(gnn, graph_batch(v, src, dst), label)[0], x)))
    return max(errs)


@pytest.mark.parametrize("seed", range(5))
def test_gnn_gradients_finite_differences(seed):
    assert _fd_gnn(seed) < 1e-4


def test_layered_equals_sparse(small_model, small_data):
    corpus = extract_corpus(small_model, small_data.X[:6], "s0")
    g = _gnn(hidden=5, seed=2)
    fast = batch_from_ipgs(corpus)
    slow = batch_from_ipgs(corpus, force_sparse=True)
    assert isinstance(fast.agg, LayeredAggregator) and isinstance(slow.agg, SparseAggregator)
    assert np.allclose(gnn_logits(g, fast), gnn_logits(g, slow), atol=1e-12)


def test_layered_occlusion_equals_bruteforce(small_model, small_data):
    g = _gnn(hidden=4, seed=5)
    for ipg in extract_corpus(small_model, small_data.X[:3], "s0"):
        src, dst = _edge_endpoints(ipg)
        slow = occlusion_scores_bruteforce(g, ipg.activation, src, dst, 1)
        fast = occlusion_scores_layered(g, ipg, 1)
        assert np.allclose(fast, slow, atol=1e-12)
        assert np.all(fast >= 0)


def test_duplicate_parallel_edge_scores_zero():
    g = _gnn(hidden=3, seed=1)
    scores = occlusion_scores_bruteforce(g, [0.3, 0.9, 0.5], [0, 0, 1], [1, 1, 2], 0)
    assert scores[0] == 0.0 and scores[1] == 0.0
    assert scores[2] > 0


def test_attribution_deterministic(small_model, small_data):
    g = _gnn(hidden=4, seed=5)
    ipg = extract_corpus(small_model, small_data.X[:1], "s0")[0]
    a, b = attribute(g, ipg, "s1"), attribute(g, ipg, "s1")
    assert np.array_equal(a.edge_score, b.edge_score)
    assert np.array_equal(a.node_score, b.node_score)
    assert len(a.edge_score) == len(ipg.edges)
    assert set(a.node_scores) == {n.id for n in ipg.nodes}


def test_train_requires_two_settings(small_model, small_data):
    corpus = extract_corpus(small_model, small_data.X[:12], "a")
    with pytest.raises(ConfigurationError):
        train_gnn({"a": corpus})
    with pytest.raises(ConfigurationError):
        train_gnn({"a": corpus, "b": corpus[:5]})


def test_identical_corpora_are_indistinguishable(small_model, small_data):
    a = extract_corpus(small_model, small_data.X[:40], "a")
    b = extract_corpus(small_model, small_data.X[:40], "b")
    gnn = train_gnn({"a": a, "b": b}, hidden_dim=4, epochs=30, test_fraction=0.5)
    assert abs(gnn.heldout_accuracy - 0.5) <= 0.1


def test_separable_training(tmp_path, small_model, small_data):
    X, y = small_data.X[:60], small_data.y[:60]
    benign = extract_corpus(small_model, X, "benign")
    adv = extract_corpus(small_model, fgsm_batch(small_model, X, y, 0.3), "fgsm")
    gnn = train_gnn({"benign": benign, "fgsm": adv}, hidden_dim=8, epochs=60, seed=1)
    h = gnn.loss_history
    assert h[5] < h[0] and h[-1] < h[5]
    gd = train_gnn({"benign": benign, "fgsm": adv}, hidden_dim=8, epochs=6, seed=1,
                   optimizer="gd")
    assert np.all(np.diff(gd.loss_history) < 0)
    assert gnn.heldout_accuracy >= 0.8
    again = train_gnn({"benign": benign, "fgsm": adv}, hidden_dim=8, epochs=60, seed=1)
    assert again.loss_history == h
    save_gnn(gnn, tmp_path / "g.json")
    back = load_gnn(tmp_path / "g.json")
    assert np.array_equal(gnn_forward(back, benign[0]), gnn_forward(gnn, benign[0]))


def _attr(scores, layer=1):
    n = len(scores)
    z = np.zeros(0, dtype=np.int64)
    return Attribution("t", "0", np.full(n, layer, dtype=np.int64), np.arange(n, dtype=np.int64),
                       np.asarray(scores, dtype=float), z, z, z, np.zeros(0))


def test_influential_identical_maps():
    a = [_attr([0.1, 0.5, 0.9, 0.2])]
    s = influential_sets(a, a, 75)
    assert not s.benign_only and not s.adversarial_only and s.shared


def test_influential_hand_map():
    benign = [_attr([0.0, 0.5, 0.5, 0.5])]
    adv = [_attr([1.0, 0.5, 0.5, 0.5])]
    s = influential_sets(benign, adv, 90)
    assert NodeId(1, 0) in s.adversarial_only
    assert NodeId(1, 0) not in s.benign_only | s.shared


def test_influential_percentile_100():
    s = influential_sets([_attr([0.3, 0.9, 0.9])], [_attr([1.0, 0.2, 0.1])], 100)
    assert s.desired_nodes == {NodeId(1, 1), NodeId(1, 2)}
    assert s.undesired_nodes == {NodeId(1, 0)}
    with pytest.raises(ConfigurationError):
        influential_sets([], [], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=10),
       st.lists(st.floats(0, 1), min_size=2, max_size=10), st.floats(1, 99))
def test_influential_partition(d, u, pct):
    s = influential_sets([_attr(d)], [_attr(u)], pct)
    assert not (s.benign_only & s.adversarial_only)
    assert not (s.benign_only & s.shared) and not (s.adversarial_only & s.shared)
    cut_d = np.percentile(d, pct)
    cut_u = np.percentile(u, pct)
    infl_d = {NodeId(1, i) for i, v in enumerate(d) if v >= cut_d}
    infl_u = {NodeId(1, i) for i, v in enumerate(u) if v >= cut_u}
    assert s.desired_nodes == infl_d and s.undesired_nodes == infl_u


def test_summary_matches_list_means(tmp_path, small_model, small_data):
    g = _gnn(hidden=4, seed=5)
    corpus = extract_corpus(small_model, small_data.X[:4], "s0")
    attrs = [attribute(g, ipg, "s0") for ipg in corpus]
    summary = AttributionSummary.of(small_model.unit_counts, attrs)
    a = influential_sets(attrs, attrs[:2], 80)
    b = influential_sets(summary, AttributionSummary.of(small_model.unit_counts, attrs[:2]), 80)
    assert a == b
    save_influential(a, tmp_path / "i.json")
    assert load_influential(tmp_path / "i.json").to_dict() == a.to_dict()
    write_attribution_csv({"s0": attrs}, tmp_path / "a.csv")
    back = read_attribution_csv(tmp_path / "a.csv")["s0"]
    node = NodeId(0, 0)
    assert back[node] == pytest.approx(np.mean([x.node_scores[node] for x in attrs]))
