import logging

import numpy as np
import pytest

import project.mgnn
from project.config import EncoderConfig
from project.errors import DimError, MissingParamsError
from project.hgraph import TOP_KEY, CompGraph, GraphEdge, lower
from project.mgnn import MultiStageEncoder, StageParams, encode, encode_batch, gcn_pass, message_pass, pool
from project.numerics.module import make_rng
from project.numerics.tensor import Tensor
from project.pruning import PruningPolicy, agent_slots, apply_policy, strategy_ratios
from tests.common.helpers import check_gradients

MODEL_FIXTURES = ["plain_toy", "resnet_toy", "mobile_v1_toy", "mobile_v2_toy", "shuffle_toy", "motif_toy"]


@pytest.fixture
def plain_hierarchy(plain_toy):
    return lower(plain_toy)


@pytest.fixture
def pruned_hierarchy(plain_toy):
    return lower(apply_policy(plain_toy, PruningPolicy(ratios={"conv2": 0.5})))


def _params(hg, hidden_dim=8, seed=0):
    return StageParams.initialize(hg, EncoderConfig(hidden_dim=hidden_dim, num_message_rounds=2), make_rng(seed))


def test_embedding_shape(plain_hierarchy):
    params = _params(plain_hierarchy)
    e = encode(plain_hierarchy, params)

    assert e.shape == (8,)
    assert np.all(np.isfinite(e.data))


def test_encoder_gradients(motif_toy, rng):
    hg = lower(motif_toy)
    params = _params(hg, hidden_dim=4, seed=3)

    check_gradients(lambda *_: encode(hg, params), params.parameters(), rng, rtol=1e-4, atol=1e-6)


def test_embedding_reflects_pruning(plain_hierarchy, pruned_hierarchy):
    params = _params(plain_hierarchy)

    assert not np.allclose(encode(plain_hierarchy, params).data, encode(pruned_hierarchy, params).data)


@pytest.mark.parametrize("name", MODEL_FIXTURES)
def test_default_encoder_separates_pruned_models(request, name):
    m = request.getfixturevalue(name)
    pruned = apply_policy(m, strategy_ratios(m, np.full(len(agent_slots(m)), 0.5)))
    hg = lower(m)
    params = StageParams.initialize(hg, EncoderConfig(), make_rng(0))

    original = encode(hg, params).data
    shrunk = encode(lower(pruned), params).data

    assert np.linalg.norm(original) > 1e-3
    assert np.max(np.abs(original - shrunk)) > 1e-3


def test_motifs_are_encoded_once_per_call(monkeypatch, motif_toy):
    hg = lower(motif_toy)
    params = _params(hg)
    calls = []
    original = project.mgnn.encode_graph

    def counting(*args, **kwargs):
        calls.append(args[0].name)
        return original(*args, **kwargs)

    monkeypatch.setattr(project.mgnn, "encode_graph", counting)

    encode(hg, params)
    assert sorted(calls) == ["motif0", "motif1"]

    calls.clear()
    encode_batch([hg, hg], params)
    assert len(calls) == 2


def test_batch_rows_match_single_encodings(plain_hierarchy, pruned_hierarchy):
    params = _params(plain_hierarchy)
    batch = encode_batch([plain_hierarchy, pruned_hierarchy], params)

    assert batch.shape == (2, 8)
    np.testing.assert_allclose(batch.data[0], encode(plain_hierarchy, params).data, atol=1e-12)
    np.testing.assert_allclose(batch.data[1], encode(pruned_hierarchy, params).data, atol=1e-12)


def test_encoder_module(plain_hierarchy):
    encoder = MultiStageEncoder.for_hierarchy(plain_hierarchy, EncoderConfig(hidden_dim=6), make_rng(0))

    assert encoder.hidden_dim == 6
    assert encoder([plain_hierarchy]).shape == (1, 6)
    assert len(encoder.parameters()) == len(encoder.params.parameters())


def test_dimension_errors(plain_hierarchy):
    top = plain_hierarchy.top

    with pytest.raises(DimError):
        pool(top, Tensor(np.ones((top.num_nodes, 4))), Tensor(np.ones(top.num_nodes + 1)))

    with pytest.raises(DimError):
        message_pass(top, Tensor(np.ones((top.num_nodes, 4))), Tensor(np.ones((1, 4))), Tensor(np.eye(4)))

    with pytest.raises(DimError):
        features = Tensor(np.ones((len(top.edges), 4)))
        message_pass(top, Tensor(np.ones((top.num_nodes, 4))), features, Tensor(np.eye(3)))

    with pytest.raises(DimError):
        StageParams(0, 1, [], {})


def test_unknown_motifs_have_no_parameters(plain_hierarchy, resnet_toy):
    params = _params(plain_hierarchy)

    with pytest.raises(MissingParamsError):
        encode(lower(resnet_toy), params)


def test_resized_top_graph_resets_pooling(plain_hierarchy, caplog):
    params = _params(plain_hierarchy)
    params.alphas[TOP_KEY].data[:] = 3.0

    with caplog.at_level(logging.WARNING):
        alpha = params.alpha(TOP_KEY, plain_hierarchy.top.num_nodes + 2)

    np.testing.assert_array_equal(alpha.data, np.ones(plain_hierarchy.top.num_nodes + 2))
    assert "resetting" in caplog.text


def _random_graph(rng):
    num_nodes = int(rng.integers(1, 13))
    num_edges = int(rng.integers(0, 2 * num_nodes + 1))
    edges = tuple(
        GraphEdge(src=int(rng.integers(num_nodes)), dst=int(rng.integers(num_nodes)), type_id=0, attr=(1.0,))
        for _ in range(num_edges)
    )
    return CompGraph(level=1, num_nodes=num_nodes, edges=edges, name="random")


def test_unit_edge_features_reduce_to_gcn(rng):
    for _ in range(10):
        g = _random_graph(rng)
        h = Tensor(rng.standard_normal((g.num_nodes, 5)))
        weight = Tensor(rng.standard_normal((5, 5)))

        with_features = message_pass(g, h, Tensor(np.ones((len(g.edges), 5))), weight)

        np.testing.assert_array_equal(with_features.data, gcn_pass(g, h, weight).data)


def test_isolated_node_receives_no_message(rng):
    g = CompGraph(level=1, num_nodes=3, edges=(GraphEdge(src=0, dst=1, type_id=0, attr=(1.0,)),))
    h = Tensor(rng.standard_normal((3, 4)))

    out = message_pass(g, h, Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((4, 4))))

    np.testing.assert_array_equal(out.data[[0, 2]], np.zeros((2, 4)))


def test_two_node_chain():
    g = CompGraph(level=1, num_nodes=2, edges=(GraphEdge(src=0, dst=1, type_id=0, attr=(1.0,)),))
    h = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    features = Tensor(np.array([[0.5, 2.0]]))
    weight = Tensor(np.array([[1.0, -1.0], [2.0, 0.5]]))

    # node 1 receives (0.5, 4) @ W = (8.5, 1.5); node 0 has no incoming edge
    np.testing.assert_allclose(message_pass(g, h, features, weight).data, [[0.0, 0.0], [8.5, 1.5]])

    # a negative pre-activation is cut by the ReLU
    flipped = Tensor(np.array([[1.0, -1.0], [-2.0, 0.5]]))
    np.testing.assert_allclose(message_pass(g, h, features, flipped).data, [[0.0, 0.0], [0.0, 1.5]])


def test_pooling_coefficients(rng):
    g = CompGraph(level=1, num_nodes=4, edges=())
    h = Tensor(rng.standard_normal((4, 3)))

    np.testing.assert_array_equal(pool(g, h, Tensor(np.array([1.0, 0.0, 0.0, 0.0]))).data, h.data[0])
    np.testing.assert_allclose(pool(g, h, Tensor(np.ones(4))).data, h.data.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(pool(g, h, Tensor(np.full(4, 0.25))).data, h.data.mean(axis=0), atol=1e-12)


def test_node_without_incoming_edges_keeps_its_state(plain_hierarchy):
    params = _params(plain_hierarchy)
    top = plain_hierarchy.top
    sources = set(range(top.num_nodes)) - {e.dst for e in top.edges}
    alpha = np.zeros(top.num_nodes)
    alpha[min(sources)] = 1.0
    params.alphas[TOP_KEY].data[:] = alpha

    # the input node starts and stays at all ones
    np.testing.assert_array_equal(encode(plain_hierarchy, params).data, np.ones(8))
