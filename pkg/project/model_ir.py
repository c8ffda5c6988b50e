import json
import logging
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Annotated

import networkx as nx
import numpy as np
from pydantic import ConfigDict, Field, ValidationError

from project.config import FrozenBaseModel
from project.errors import CycleError, SchemaError, ShapeError
from project.numerics.serialization import TensorGroups, load_tensors, save_tensors

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]


class LayerKind(str, Enum):
    conv2d = "conv2d"
    depthwise_conv2d = "depthwise_conv2d"
    pointwise_conv2d = "pointwise_conv2d"
    dense = "dense"
    maxpool = "maxpool"
    avgpool = "avgpool"
    global_avgpool = "global_avgpool"
    relu = "relu"
    batchnorm = "batchnorm"
    add = "add"
    concat = "concat"
    channel_shuffle = "channel_shuffle"
    flatten = "flatten"


class BlockKind(str, Enum):
    plain = "plain"
    residual = "residual"
    mobile_v1 = "mobile_v1"
    mobile_v2 = "mobile_v2"
    shuffle = "shuffle"


CONV_KINDS = frozenset({LayerKind.conv2d, LayerKind.depthwise_conv2d, LayerKind.pointwise_conv2d})
PRUNABLE_KINDS = frozenset({LayerKind.conv2d, LayerKind.pointwise_conv2d})
POOL_KINDS = frozenset({LayerKind.maxpool, LayerKind.avgpool})
# single-input layers whose output channel i is derived from input channel i only
CHANNEL_PRESERVING_KINDS = frozenset(
    {
        LayerKind.relu,
        LayerKind.batchnorm,
        LayerKind.maxpool,
        LayerKind.avgpool,
        LayerKind.depthwise_conv2d,
    }
)


class LayerSpec(FrozenBaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    id: str
    kind: LayerKind
    in_channels: Annotated[int | None, Field(ge=1)] = None
    out_channels: Annotated[int | None, Field(ge=1)] = None
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: Annotated[int, Field(ge=1)] = 1
    prunable: bool = False
    # width before any pruning was applied
    base_channels: Annotated[int | None, Field(ge=1)] = None
    pruned: bool = False
    weights: Annotated[dict[str, np.ndarray] | None, Field(exclude=True)] = None

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    def to_document(self) -> dict:
        return self.model_dump(mode="json", exclude={"weights"})


class BlockSpec(FrozenBaseModel):
    name: str
    kind: BlockKind = BlockKind.plain
    layers: tuple[str, ...]
    # the block's output layer; inferred when omitted
    output: str | None = None
    # the expansion (linear projection) layer used by the mobile_v2 and shuffle strategies; inferred when omitted
    expansion: str | None = None


class ModelDocument(FrozenBaseModel):
    """Schema of the JSON IR document."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "model"
    input_shape: tuple[int, int, int]
    layers: Annotated[list[LayerSpec], Field(min_length=1)]
    edges: list[tuple[str, str]] = []
    blocks: list[BlockSpec] = []
    share_groups: list[list[str]] = []


class ModelIR(FrozenBaseModel):
    """Validated network with inferred shapes. Build instances with `build_model` or `parse_model`."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    edges: tuple[tuple[str, str], ...]
    blocks: tuple[BlockSpec, ...]
    share_groups: tuple[tuple[str, ...], ...]
    shapes: dict[str, Shape]

    @cached_property
    def layer_map(self) -> dict[str, LayerSpec]:
        return {layer.id: layer for layer in self.layers}

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layer_map[layer_id]

    @cached_property
    def graph(self) -> nx.DiGraph:
        return _dataflow_graph(self.layers, self.edges)

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        return _topological_order(self.layers, self.graph)

    @cached_property
    def topo_index(self) -> dict[str, int]:
        return {layer_id: i for i, layer_id in enumerate(self.topo_order)}

    @cached_property
    def producer_map(self) -> dict[str, list[str]]:
        producers = {layer.id: [] for layer in self.layers}

        for src, dst in self.edges:
            producers[dst].append(src)

        return producers

    @cached_property
    def consumer_map(self) -> dict[str, list[str]]:
        consumers = {layer.id: [] for layer in self.layers}

        for src, dst in self.edges:
            consumers[src].append(dst)

        return consumers

    def producers(self, layer_id: str) -> list[str]:
        """Producers in edge order; an empty list means the layer reads the model input."""
        return self.producer_map[layer_id]

    def consumers(self, layer_id: str) -> list[str]:
        return self.consumer_map[layer_id]

    @cached_property
    def output_layer(self) -> str:
        return [layer_id for layer_id in self.topo_order if len(self.consumers(layer_id)) == 0][0]

    def input_shape_of(self, layer_id: str) -> Shape:
        producers = self.producers(layer_id)
        return self.shapes[producers[0]] if producers else tuple(self.input_shape)

    @cached_property
    def block_map(self) -> dict[str, BlockSpec]:
        return {layer_id: block for block in self.blocks for layer_id in block.layers}

    def block_of(self, layer_id: str) -> BlockSpec | None:
        return self.block_map.get(layer_id)

    def block_output(self, block: BlockSpec) -> str:
        if block.output is not None:
            return block.output

        members = set(block.layers)
        leaving = [
            layer_id
            for layer_id in block.layers
            if len(self.consumers(layer_id)) == 0 or any(c not in members for c in self.consumers(layer_id))
        ]

        if len(leaving) != 1:
            raise SchemaError(f"block {block.name} must have exactly one output layer, found {leaving}")

        return leaving[0]

    def expansion_layer(self, block: BlockSpec) -> str | None:
        """The last channel-producing convolution on the path to the block output."""
        if block.expansion is not None:
            return block.expansion

        members = set(block.layers)
        current = self.block_output(block)

        while current is not None:
            layer = self.layer(current)

            if layer.kind in PRUNABLE_KINDS:
                return current

            inside = [p for p in self.producers(current) if p in members]
            current = inside[-1] if inside else None

        return None

    @cached_property
    def share_group_of(self) -> dict[str, tuple[str, ...]]:
        return {layer_id: group for group in self.share_groups for layer_id in group}

    def replace(self, **update) -> "ModelIR":
        """Copy with some fields replaced; cached lookups are not carried over."""
        fields = {name: getattr(self, name) for name in type(self).model_fields}
        return ModelIR(**{**fields, **update})

    @property
    def has_weights(self) -> bool:
        return all(layer.weights is not None for layer in self.layers if _has_parameters(layer.kind))

    def with_weights(self, weights: TensorGroups) -> "ModelIR":
        layers = []

        for layer in self.layers:
            if _has_parameters(layer.kind):
                if layer.id not in weights:
                    raise SchemaError(f"weights are missing for layer {layer.id}")

                layer = layer.model_copy(update={"weights": _frozen_weights(weights[layer.id])})
                _check_weight_shapes(layer)

            layers.append(layer)

        return self.replace(layers=tuple(layers))

    def without_weights(self) -> "ModelIR":
        return self.replace(layers=tuple(layer.model_copy(update={"weights": None}) for layer in self.layers))

    def weight_groups(self) -> TensorGroups:
        return {layer.id: dict(layer.weights) for layer in self.layers if layer.weights is not None}

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_document() for layer in self.layers],
            "edges": [list(edge) for edge in self.edges],
            "blocks": [block.model_dump(mode="json") for block in self.blocks],
            "share_groups": [list(group) for group in self.share_groups],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2)


def _has_parameters(kind: LayerKind) -> bool:
    return kind in CONV_KINDS or kind in (LayerKind.dense, LayerKind.batchnorm)


def _frozen_weights(weights: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    frozen = {}

    for name, array in weights.items():
        array = np.array(array, dtype=np.float64)
        array.flags.writeable = False
        frozen[name] = array

    return frozen


def _dataflow_graph(layers, edges) -> nx.DiGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(layer.id for layer in layers)
    graph.add_edges_from(edges)
    return graph


def _topological_order(layers, graph: nx.DiGraph) -> tuple[str, ...]:
    position = {layer.id: i for i, layer in enumerate(layers)}
    return tuple(nx.lexicographical_topological_sort(graph, key=lambda n: position[n]))


def parse_model(text: str | bytes) -> ModelIR:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"IR document is not valid JSON: {e}")

    try:
        document = ModelDocument.model_validate(payload)
    except ValidationError as e:
        raise SchemaError(f"IR document does not match the schema: {e}")

    return build_model(
        name=document.name,
        input_shape=document.input_shape,
        layers=document.layers,
        edges=document.edges,
        blocks=document.blocks,
        share_groups=document.share_groups,
    )


def load_model(path: Path, weights_path: Path | None = None) -> ModelIR:
    model = parse_model(path.read_text())

    if weights_path is not None:
        model = model.with_weights(load_tensors(weights_path))

    return model


def save_model(model: ModelIR, path: Path, weights_path: Path | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.to_json())

    if weights_path is not None:
        save_tensors(weights_path, model.weight_groups())


def build_model(
    input_shape,
    layers,
    edges=(),
    blocks=(),
    share_groups=(),
    name: str = "model",
) -> ModelIR:
    """Validate structure, infer shapes by forward propagation and complete the share groups."""
    layers = tuple(layers)
    edges = tuple((str(a), str(b)) for a, b in edges)
    blocks = tuple(blocks)

    ids = [layer.id for layer in layers]
    if len(set(ids)) != len(ids):
        raise SchemaError("layer ids must be unique")

    known = set(ids)
    for src, dst in edges:
        if src not in known or dst not in known:
            raise SchemaError(f"edge ({src}, {dst}) references an unknown layer")

    if len(set(edges)) != len(edges):
        raise SchemaError("duplicate dataflow edges")

    _check_blocks(blocks, known)

    for layer in layers:
        if layer.prunable and layer.kind not in PRUNABLE_KINDS:
            raise SchemaError(f"layer {layer.id} of kind {layer.kind.value} cannot be prunable")

        if layer.kind == LayerKind.pointwise_conv2d and tuple(layer.kernel) != (1, 1):
            raise SchemaError(f"pointwise layer {layer.id} must have a (1, 1) kernel")

    graph = _dataflow_graph(layers, edges)
    if not nx.is_directed_acyclic_graph(graph):
        raise CycleError(f"dataflow contains a cycle: {nx.find_cycle(graph)}")

    sinks = [n for n in graph.nodes if graph.out_degree(n) == 0]
    if len(sinks) != 1:
        raise SchemaError(f"model must have exactly one output layer, found {sorted(sinks)}")

    order = _topological_order(layers, graph)
    layer_map = {layer.id: layer for layer in layers}
    producers = {layer.id: [] for layer in layers}
    for src, dst in edges:
        producers[dst].append(src)

    shapes: dict[str, Shape] = {}
    resolved: dict[str, LayerSpec] = {}

    for layer_id in order:
        in_shapes = [shapes[p] for p in producers[layer_id]] or [tuple(input_shape)]
        resolved[layer_id], shapes[layer_id] = _infer_layer(layer_map[layer_id], in_shapes)

    groups = _complete_share_groups(resolved, producers, order, share_groups)
    resolved, groups = _demote_frozen_groups(resolved, groups, producers)

    return ModelIR(
        name=name,
        input_shape=tuple(input_shape),
        layers=tuple(resolved[layer.id] for layer in layers),
        edges=edges,
        blocks=blocks,
        share_groups=groups,
        shapes=shapes,
    )


def _check_blocks(blocks, known: set[str]):
    seen = set()

    for block in blocks:
        for layer_id in block.layers:
            if layer_id not in known:
                raise SchemaError(f"block {block.name} references unknown layer {layer_id}")

            if layer_id in seen:
                raise SchemaError(f"layer {layer_id} belongs to more than one block")

            seen.add(layer_id)

        for role in (block.output, block.expansion):
            if role is not None and role not in block.layers:
                raise SchemaError(f"layer {role} is not part of block {block.name}")


def _conv_output_size(size: int, kernel: int, stride: int, padding: int, layer_id: str) -> int:
    out = (size + 2 * padding - kernel) // stride + 1

    if out < 1:
        raise ShapeError(f"layer {layer_id} produces an empty feature map")

    return out


def _infer_layer(layer: LayerSpec, in_shapes: list[Shape]) -> tuple[LayerSpec, Shape]:
    kind = layer.kind

    if kind not in (LayerKind.add, LayerKind.concat) and len(in_shapes) != 1:
        raise ShapeError(f"layer {layer.id} of kind {kind.value} takes exactly one input, got {len(in_shapes)}")

    shape = in_shapes[0]
    groups = layer.groups

    if kind in CONV_KINDS or kind in POOL_KINDS or kind in (LayerKind.global_avgpool, LayerKind.flatten):
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.id} expects a (c, h, w) input, got {shape}")

    if kind == LayerKind.add:
        if len(in_shapes) < 2:
            raise ShapeError(f"add layer {layer.id} needs at least two inputs")

        if any(s != shape for s in in_shapes):
            raise ShapeError(f"add layer {layer.id} joins inputs with unequal shapes {in_shapes}")

        channels_in, out_shape = shape[0], shape
    elif kind == LayerKind.concat:
        if any(len(s) != len(shape) or s[1:] != shape[1:] for s in in_shapes):
            raise ShapeError(f"concat layer {layer.id} joins inputs with incompatible shapes {in_shapes}")

        channels_in = sum(s[0] for s in in_shapes)
        out_shape = (channels_in, *shape[1:])
    else:
        channels_in = shape[0]

        if layer.in_channels is not None and layer.in_channels != channels_in:
            raise ShapeError(f"layer {layer.id} expects {layer.in_channels} input channels, got {channels_in}")

        if kind in CONV_KINDS:
            out_channels = layer.out_channels

            if kind == LayerKind.depthwise_conv2d:
                if out_channels is not None and out_channels != channels_in:
                    raise ShapeError(f"depthwise layer {layer.id} must keep {channels_in} channels")

                if groups not in (1, channels_in):
                    raise ShapeError(f"depthwise layer {layer.id} must have groups == {channels_in}")

                out_channels, groups = channels_in, channels_in
            elif out_channels is None:
                raise SchemaError(f"layer {layer.id} needs out_channels")

            if channels_in % groups != 0 or out_channels % groups != 0:
                raise ShapeError(f"layer {layer.id}: {groups} groups do not divide {channels_in} -> {out_channels}")

            h = _conv_output_size(shape[1], layer.kernel[0], layer.stride[0], layer.padding[0], layer.id)
            w = _conv_output_size(shape[2], layer.kernel[1], layer.stride[1], layer.padding[1], layer.id)
            out_shape = (out_channels, h, w)
        elif kind in POOL_KINDS:
            h = _conv_output_size(shape[1], layer.kernel[0], layer.stride[0], layer.padding[0], layer.id)
            w = _conv_output_size(shape[2], layer.kernel[1], layer.stride[1], layer.padding[1], layer.id)
            out_shape = (channels_in, h, w)
        elif kind == LayerKind.global_avgpool:
            out_shape = (channels_in,)
        elif kind == LayerKind.flatten:
            out_shape = (int(np.prod(shape)),)
        elif kind == LayerKind.dense:
            if len(shape) != 1:
                raise ShapeError(f"dense layer {layer.id} expects a flat input, got {shape}")

            if layer.out_channels is None:
                raise SchemaError(f"layer {layer.id} needs out_channels")

            out_shape = (layer.out_channels,)
        elif kind == LayerKind.channel_shuffle:
            if channels_in % groups != 0:
                raise ShapeError(f"channel shuffle {layer.id}: {groups} groups do not divide {channels_in} channels")

            out_shape = shape
        else:
            # relu, batchnorm
            out_shape = shape

    resolved = layer.model_copy(
        update={
            "in_channels": channels_in,
            "out_channels": out_shape[0],
            "groups": groups,
            "base_channels": layer.base_channels or out_shape[0],
        }
    )
    _check_weight_shapes(resolved)

    return resolved, out_shape


def expected_weight_shapes(layer: LayerSpec) -> dict[str, Shape]:
    if layer.kind in CONV_KINDS:
        kh, kw = layer.kernel
        return {
            "weight": (layer.out_channels, layer.in_channels // layer.groups, kh, kw),
            "bias": (layer.out_channels,),
        }

    if layer.kind == LayerKind.dense:
        return {"weight": (layer.out_channels, layer.in_channels), "bias": (layer.out_channels,)}

    if layer.kind == LayerKind.batchnorm:
        c = layer.out_channels
        return {"gamma": (c,), "beta": (c,), "running_mean": (c,), "running_var": (c,)}

    return {}


def _check_weight_shapes(layer: LayerSpec):
    if layer.weights is None:
        return

    for name, shape in expected_weight_shapes(layer).items():
        if name not in layer.weights:
            raise SchemaError(f"layer {layer.id} is missing weight tensor {name}")

        if tuple(layer.weights[name].shape) != shape:
            raise ShapeError(f"weight {layer.id}/{name} has shape {layer.weights[name].shape}, expected {shape}")


def channel_root(layer_id: str | None, layers: dict[str, LayerSpec], producers: dict[str, list[str]]) -> str | None:
    """Walk back through channel-preserving layers to the layer that defines the channel dimension.
    Returns None when the channels come straight from the model input."""
    while layer_id is not None and layers[layer_id].kind in CHANNEL_PRESERVING_KINDS:
        inputs = producers[layer_id]
        layer_id = inputs[0] if inputs else None

    return layer_id


def _complete_share_groups(layers, producers, order, explicit) -> list[set[str | None]]:
    """Union explicit share groups with the channel roots joined by every add layer."""
    uf = nx.utils.UnionFind()
    seen: set[str] = set()

    for group in explicit:
        group = list(group)

        for layer_id in group:
            if layer_id not in layers:
                raise SchemaError(f"share group references unknown layer {layer_id}")

            if layer_id in seen:
                raise SchemaError(f"layer {layer_id} appears in more than one share group")

            seen.add(layer_id)

        channels = {layers[layer_id].out_channels for layer_id in group}
        if len(channels) > 1:
            raise ShapeError(f"share group {group} has members with different out_channels {sorted(channels)}")

        uf.union(*group)

    for layer_id in order:
        if layers[layer_id].kind != LayerKind.add:
            continue

        roots = [channel_root(p, layers, producers) for p in producers[layer_id]]
        # the model input is represented by None and freezes the whole group
        uf.union(layer_id, *roots)

    return [set(component) for component in uf.to_sets()]


def _demote_frozen_groups(layers, components, producers):
    """Keep prunable convolutions of every component as a share group. Components that also contain the model input,
    a non-prunable layer or anything that is not an add are frozen: their convolutions are demoted to non-prunable."""
    order_index = {layer_id: i for i, layer_id in enumerate(layers)}
    groups = []

    for component in components:
        convs = [m for m in component if m is not None and layers[m].kind in PRUNABLE_KINDS]
        others = [m for m in component if m is None or layers[m].kind not in PRUNABLE_KINDS]

        if len(convs) + len(others) < 2:
            continue

        frozen = any(m is None or layers[m].kind != LayerKind.add for m in others) or any(
            not layers[m].prunable for m in convs
        )

        if frozen:
            demoted = sorted(m for m in convs if layers[m].prunable)

            if demoted:
                logger.warning(f"Share group {sorted(convs)} cannot be pruned, marking {demoted} as non-prunable.")

            for m in convs:
                layers[m] = layers[m].model_copy(update={"prunable": False})

        if len(convs) >= 2:
            groups.append(tuple(sorted(convs, key=order_index.__getitem__)))

    groups.sort(key=lambda g: order_index[g[0]])
    return layers, tuple(groups)
