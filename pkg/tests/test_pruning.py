import json

import numpy as np
import pytest
from pydantic import ValidationError

from project.errors import PolicyError, StrategyError
from project.flops import count_flops
from project.model_ir import parse_model
from project.oracle import execute
from project.pruning import (
    PruningPolicy,
    agent_slots,
    apply_policy,
    channel_granularity,
    effective_ratios,
    keep_count,
    pruning_units,
    select_channels,
    strategy_ratios,
    zero_policy,
)
from tests.common.helpers import FIXTURE_NAMES, fixture_path, kept_filters, load_fixture, random_policy


@pytest.mark.parametrize(
    "channels,ratio,granularity,expected",
    [(16, 0.5, 1, 8), (16, 0.3, 1, 11), (16, 0.0, 1, 16), (3, 0.8, 1, 1), (16, 0.5, 4, 8), (16, 0.8, 4, 4)],
)
def test_keep_count(channels, ratio, granularity, expected):
    assert keep_count(channels, ratio, granularity) == expected


def test_select_channels_prefers_large_norms():
    importance = np.array([0.1, 0.9, 0.5, 0.9])

    assert select_channels(importance, 4, 2).tolist() == [1, 3]
    assert select_channels(None, 4, 2).tolist() == [0, 1]
    # balanced over two slices
    assert select_channels(importance, 4, 2, slices=2).tolist() == [1, 3]


def test_single_convolution_halved(single_conv):
    pruned = apply_policy(single_conv, PruningPolicy(ratios={"conv": 0.5}))

    assert pruned.layer("conv").out_channels == 8
    assert pruned.layer("conv").base_channels == 16
    assert pruned.layer("conv").pruned
    assert effective_ratios(pruned) == {"conv": 0.5}


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_zero_policy_is_identity(name):
    m = load_fixture(name)
    pruned = apply_policy(m, zero_policy(m))

    assert pruned.to_document() == m.to_document()


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_random_policies_keep_the_model_valid(name, with_initial_weights, rng):
    m = with_initial_weights(load_fixture(name))
    total = count_flops(m).total

    for _ in range(100):
        p = random_policy(m, rng)
        pruned = apply_policy(m, p)

        # rebuilding from the exported document validates shapes again
        again = parse_model(pruned.to_json())
        assert again.shapes == pruned.shapes
        assert pruned.has_weights
        assert 0 < count_flops(pruned).total <= total

        for unit in pruning_units(m):
            widths = {pruned.layer(layer_id).out_channels for layer_id in unit}
            assert len(widths) == 1


@pytest.mark.parametrize("name", ["plain_toy", "resnet_toy", "mobile_v2_toy", "shuffle_toy"])
def test_more_pruning_never_costs_more(name, rng):
    m = load_fixture(name)

    for _ in range(20):
        p = random_policy(m, rng, a_max=0.4)
        extra = rng.uniform(0.0, 0.4)
        more = PruningPolicy(ratios={layer_id: ratio + extra for layer_id, ratio in p.ratios.items()})

        assert count_flops(apply_policy(m, more)).total <= count_flops(apply_policy(m, p)).total


def test_share_group_keeps_identical_channels(resnet_toy, with_initial_weights):
    m = with_initial_weights(resnet_toy)
    group = m.share_groups[0]
    pruned = apply_policy(m, PruningPolicy(ratios={layer_id: 0.5 for layer_id in group}))

    kept = [kept_filters(m.layer(i).weights["weight"], pruned.layer(i).weights["weight"]) for i in group]

    assert len(kept[0]) == 16
    assert all(k == kept[0] for k in kept)
    # the residual adds and batch norms follow the group width
    assert pruned.shapes["b2_add"][0] == 16
    assert pruned.layer("b1_bn2").out_channels == 16
    assert pruned.layer("b1_conv1").in_channels == 16


def test_unequal_share_group_ratios(resnet_toy):
    with pytest.raises(PolicyError):
        apply_policy(resnet_toy, PruningPolicy(ratios={"stem": 0.5, "b1_conv2": 0.2}))


def test_invalid_policies(mobile_v1_toy):
    with pytest.raises(PolicyError):
        apply_policy(mobile_v1_toy, PruningPolicy(ratios={"dw": 0.5}))

    with pytest.raises(PolicyError):
        apply_policy(mobile_v1_toy, PruningPolicy(ratios={"missing": 0.5}))

    with pytest.raises(ValidationError):
        PruningPolicy(ratios={"pw": 0.9})


def test_mobile_v1_prunes_pointwise_only(mobile_v1_toy):
    assert agent_slots(mobile_v1_toy) == [("pw",)]
    assert strategy_ratios(mobile_v1_toy, [0.5]).ratios == {"pw": 0.5}

    pruned = apply_policy(mobile_v1_toy, strategy_ratios(mobile_v1_toy, [0.5]))
    assert pruned.layer("pw").out_channels == 8
    assert pruned.layer("fc").in_channels == 8


def test_mobile_v2_ties_projections(mobile_v2_toy):
    slots = agent_slots(mobile_v2_toy)

    assert slots == [("stem",), ("b1_expand",), ("b1_project", "b2_project"), ("b2_expand",)]

    p = strategy_ratios(mobile_v2_toy, [0.0, 0.25, 0.5, 0.75])
    assert p.ratios["b1_project"] == p.ratios["b2_project"] == 0.5

    pruned = apply_policy(mobile_v2_toy, p)
    assert pruned.layer("b1_dw").groups == pruned.layer("b1_expand").out_channels == 12


def test_shuffle_skips_expansion_layers(shuffle_toy):
    slots = agent_slots(shuffle_toy)

    assert slots == [("u1_gconv1",), ("u2_gconv1",)]
    assert channel_granularity(shuffle_toy, slots[0]) == 4

    p = strategy_ratios(shuffle_toy, [0.5, 0.5])
    assert "u1_gconv2" not in p.ratios

    pruned = apply_policy(shuffle_toy, p)
    assert pruned.layer("u1_gconv1").out_channels % 4 == 0


def test_shuffle_prunes_every_unit_layer_but_the_expansion():
    document = json.loads(fixture_path("shuffle_toy").read_text())
    for layer in document["layers"]:
        if layer["id"] == "u1_dw":
            layer.update(kind="conv2d", out_channels=16, groups=2, prunable=True)

    m = parse_model(json.dumps(document))

    assert agent_slots(m) == [("u1_gconv1",), ("u1_dw",), ("u2_gconv1",)]
    assert "u1_gconv2" not in strategy_ratios(m, [0.5, 0.5, 0.5]).ratios


def test_pruned_shuffle_network_runs(shuffle_toy, with_initial_weights, batch):
    m = with_initial_weights(shuffle_toy)
    pruned = apply_policy(m, strategy_ratios(m, [0.5, 0.0]))
    logits = execute(pruned, batch(m))

    assert logits.shape == (4, 4)
    assert np.all(np.isfinite(logits))


def test_strategy_clips_and_checks(mobile_v2_toy):
    assert set(strategy_ratios(mobile_v2_toy, [-1.0, 2.0, 0.1, 0.1]).ratios.values()) == {0.0, 0.8, 0.1}

    with pytest.raises(StrategyError):
        strategy_ratios(mobile_v2_toy, [0.1, 0.1])

    with pytest.raises(StrategyError):
        strategy_ratios(mobile_v2_toy, [np.nan, 0.1, 0.1, 0.1])


def _zero_filters(m, layer_id, channels):
    weights = m.weight_groups()
    group = {name: array.copy() for name, array in weights[layer_id].items()}
    group["weight"][channels] = 0.0
    group["bias"][channels] = 0.0
    weights[layer_id] = group
    return m.with_weights(weights)


def test_pruning_dead_channels_preserves_outputs(plain_toy, with_initial_weights, batch):
    m = with_initial_weights(plain_toy)
    m = _zero_filters(m, "conv1", [11, 12, 13, 14, 15])
    m = _zero_filters(m, "conv2", [0, 2, 4, 6, 8])
    x = batch(m, 8)

    pruned = apply_policy(m, PruningPolicy(ratios={"conv1": 0.3, "conv2": 0.3}))

    assert pruned.layer("conv1").out_channels == 11
    assert pruned.layer("conv2").out_channels == 11
    np.testing.assert_allclose(execute(pruned, x), execute(m, x), atol=1e-10)


def test_pruning_dead_residual_channels_preserves_outputs(resnet_toy, with_initial_weights, batch):
    m = with_initial_weights(resnet_toy)
    dead = list(range(16, 32))

    # initial batch norms are the identity so zero filters stay zero through every residual add
    for layer_id in m.share_groups[0]:
        m = _zero_filters(m, layer_id, dead)

    x = batch(m, 4)
    pruned = apply_policy(m, PruningPolicy(ratios={layer_id: 0.5 for layer_id in m.share_groups[0]}))

    np.testing.assert_allclose(execute(pruned, x), execute(m, x), atol=1e-8)
