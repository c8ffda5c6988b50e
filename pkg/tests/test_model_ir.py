import json

import numpy as np
import pytest

from project.errors import CycleError, SchemaError, ShapeError
from project.model_ir import (
    LayerKind,
    LayerSpec,
    build_model,
    expected_weight_shapes,
    load_model,
    parse_model,
    save_model,
)
from project.oracle import execute
from tests.common.helpers import FIXTURE_NAMES, fixture_path, load_fixture


def _conv(layer_id, out_channels, prunable=True, **kwargs):
    return LayerSpec(id=layer_id, kind=LayerKind.conv2d, out_channels=out_channels, prunable=prunable, **kwargs)


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_fixtures_parse(name):
    m = load_fixture(name)

    assert m.name == name
    assert len(m.topo_order) == len(m.layers)
    assert len(m.consumers(m.output_layer)) == 0


def test_shapes_are_inferred(plain_toy):
    assert plain_toy.shapes["conv1"] == (16, 8, 8)
    assert plain_toy.shapes["flatten"] == (16 * 8 * 8,)
    assert plain_toy.shapes["fc"] == (2,)
    assert plain_toy.layer("conv2").in_channels == 16
    assert plain_toy.layer("conv2").base_channels == 16


def test_residual_share_group(resnet_toy):
    assert len(resnet_toy.blocks) == 3
    assert resnet_toy.share_groups == (("stem", "b1_conv2", "b2_conv2", "b3_conv2"),)
    assert all(resnet_toy.layer(layer_id).prunable for layer_id in resnet_toy.share_groups[0])
    assert resnet_toy.share_group_of["b2_conv2"] == resnet_toy.share_groups[0]


def test_depthwise_groups_are_inferred(mobile_v1_toy):
    dw = mobile_v1_toy.layer("dw")

    assert dw.groups == dw.in_channels == dw.out_channels == 8


def test_block_roles(mobile_v2_toy):
    bottleneck = mobile_v2_toy.block_map["b1_expand"]

    assert mobile_v2_toy.block_output(bottleneck) == "b1_bn"
    assert mobile_v2_toy.expansion_layer(bottleneck) == "b1_project"


def test_add_with_unequal_channels():
    layers = [_conv("a", 8), _conv("b", 16), LayerSpec(id="add", kind=LayerKind.add)]

    with pytest.raises(ShapeError):
        build_model((3, 8, 8), layers, edges=[("a", "add"), ("b", "add")])


def test_cycle_is_rejected():
    layers = [_conv("a", 8), LayerSpec(id="relu", kind=LayerKind.relu), LayerSpec(id="out", kind=LayerKind.relu)]

    with pytest.raises(CycleError):
        build_model((3, 8, 8), layers, edges=[("a", "relu"), ("relu", "a"), ("relu", "out")])


@pytest.mark.parametrize(
    "text",
    [
        "{not json",
        json.dumps({"input_shape": [3, 8, 8], "layers": []}),
        json.dumps({"input_shape": [3, 8, 8], "layers": [{"id": "x", "kind": "softmax"}]}),
        json.dumps({"input_shape": [3, 8, 8], "layers": [{"id": "x", "kind": "relu"}], "extra": 1}),
    ],
)
def test_malformed_documents(text):
    with pytest.raises(SchemaError):
        parse_model(text)


def test_structural_errors():
    relu = LayerSpec(id="relu", kind=LayerKind.relu)

    with pytest.raises(SchemaError):
        build_model((3, 8, 8), [relu, relu])

    with pytest.raises(SchemaError):
        build_model((3, 8, 8), [relu], edges=[("relu", "missing")])

    with pytest.raises(SchemaError):
        # two outputs
        build_model((3, 8, 8), [_conv("a", 4), _conv("b", 4)])

    with pytest.raises(SchemaError):
        build_model((3, 8, 8), [LayerSpec(id="x", kind=LayerKind.relu, prunable=True)])


def test_empty_feature_map():
    with pytest.raises(ShapeError):
        build_model((3, 2, 2), [_conv("a", 4, kernel=(5, 5))])


def test_add_needs_two_inputs():
    layers = [_conv("a", 3), LayerSpec(id="add", kind=LayerKind.add)]

    with pytest.raises(ShapeError):
        build_model((3, 8, 8), layers, edges=[("a", "add")])


def test_input_residual_demotes_the_convolution():
    layers = [
        _conv("a", 3, kernel=(3, 3), padding=(1, 1)),
        LayerSpec(id="relu", kind=LayerKind.relu),
        LayerSpec(id="add", kind=LayerKind.add),
    ]

    # the add joins the conv branch with the raw model input through relu
    m = build_model((3, 8, 8), layers, edges=[("a", "add"), ("relu", "add")])

    assert not m.layer("a").prunable
    assert m.share_groups == ()


def test_explicit_share_groups_must_agree_on_width():
    layers = [_conv("a", 8), _conv("b", 16), LayerSpec(id="out", kind=LayerKind.concat)]

    with pytest.raises(ShapeError):
        build_model((3, 8, 8), layers, edges=[("a", "out"), ("b", "out")], share_groups=[["a", "b"]])


def test_to_json_reparses(resnet_toy):
    again = parse_model(resnet_toy.to_json())

    assert again.to_document() == resnet_toy.to_document()
    assert again.shapes == resnet_toy.shapes


def test_weights_round_trip(tmp_path, plain_toy, with_initial_weights, batch):
    m = with_initial_weights(plain_toy)

    save_model(m, tmp_path / "model.json", tmp_path / "weights.bin")
    loaded = load_model(tmp_path / "model.json", tmp_path / "weights.bin")

    assert loaded.has_weights
    np.testing.assert_allclose(
        loaded.layer("conv2").weights["weight"], m.layer("conv2").weights["weight"], rtol=1e-6, atol=1e-7
    )

    # float32 storage: the reloaded network agrees up to rounding, and a second round trip is exact
    x = batch(m, 4)
    np.testing.assert_allclose(execute(loaded, x), execute(m, x), rtol=1e-5, atol=1e-6)

    save_model(loaded, tmp_path / "again.json", tmp_path / "again.bin")
    again = load_model(tmp_path / "again.json", tmp_path / "again.bin")
    np.testing.assert_array_equal(execute(again, x), execute(loaded, x))


def test_weights_are_read_only(plain_toy, with_initial_weights):
    m = with_initial_weights(plain_toy)

    with pytest.raises(ValueError):
        m.layer("conv1").weights["weight"][0, 0, 0, 0] = 1.0


def test_weight_shapes_are_checked(single_conv):
    shapes = expected_weight_shapes(single_conv.layer("conv"))
    assert shapes == {"weight": (16, 3, 3, 3), "bias": (16,)}

    with pytest.raises(ShapeError):
        single_conv.with_weights({"conv": {"weight": np.zeros((16, 3, 1, 1)), "bias": np.zeros(16)}})

    with pytest.raises(SchemaError):
        single_conv.with_weights({})


def test_symbolic_model_has_no_weights():
    m = load_model(fixture_path("single_conv"))

    assert not m.has_weights
    assert m.weight_groups() == {}
