"""Lowering of a ModelIR into a two-level hierarchical computational graph.

Level 0 is the table of primitive layer kinds. Level 1 holds one graph per canonically distinct block (motif); its
edges are layers typed by primitive. Level 2 is the network: nodes are block-boundary feature maps and every block
instance is one edge typed by its motif, carrying the block's current compression state as an attribute vector.
"""

import json
from collections import defaultdict
from hashlib import blake2b
from typing import Sequence

import networkx as nx
import numpy as np
from pydantic import model_validator

from project.config import FrozenBaseModel
from project.errors import LowerError, PruneSearchError
from project.model_ir import CONV_KINDS, POOL_KINDS, PRUNABLE_KINDS, BlockSpec, LayerKind, ModelIR

TOP_KEY = "top"
MOTIF_ATTR_DIM = 4
NETWORK_ATTR_DIM = 5


class PrimitiveTable(FrozenBaseModel):
    kinds: tuple[LayerKind, ...] = tuple(LayerKind)

    def index(self, kind: LayerKind) -> int:
        try:
            return self.kinds.index(kind)
        except ValueError:
            raise LowerError(f"layer kind {kind.value} is not a primitive of this table")

    def features(self) -> np.ndarray:
        """One-hot initial feature vector per primitive."""
        return np.eye(len(self.kinds))

    def __len__(self):
        return len(self.kinds)


class GraphEdge(FrozenBaseModel):
    src: int
    dst: int
    type_id: int
    attr: tuple[float, ...]


class CompGraph(FrozenBaseModel):
    level: int
    num_nodes: int
    edges: tuple[GraphEdge, ...]
    name: str = ""

    @property
    def nodes(self) -> list[int]:
        return list(range(self.num_nodes))

    @property
    def attr_dim(self) -> int:
        return len(self.edges[0].attr) if self.edges else 0

    def to_networkx(self) -> nx.MultiDiGraph:
        graph = nx.MultiDiGraph()
        graph.add_nodes_from(self.nodes)

        for edge in self.edges:
            graph.add_edge(edge.src, edge.dst, type_id=edge.type_id, attr=edge.attr)

        return graph


class MotifKey(FrozenBaseModel):
    canonical_hash: str


class HierGraph(FrozenBaseModel):
    primitives: PrimitiveTable
    # graph_levels[t - 1] is the table of level t; the last level holds exactly one graph
    graph_levels: tuple[tuple[CompGraph, ...], ...]
    # canonical keys parallel to graph_levels; the top graph is keyed TOP_KEY
    keys: tuple[tuple[str, ...], ...]

    @model_validator(mode="after")
    def _check_resolution(self):
        if len(self.graph_levels) == 0 or len(self.graph_levels[-1]) != 1:
            raise LowerError("the top level must contain exactly one graph")

        for t, table in enumerate(self.graph_levels):
            lower_size = len(self.primitives) if t == 0 else len(self.graph_levels[t - 1])

            for graph in table:
                for edge in graph.edges:
                    if not 0 <= edge.type_id < lower_size:
                        raise LowerError(f"edge type {edge.type_id} of {graph.name} does not resolve at level {t}")

        return self

    @property
    def levels(self) -> list:
        return [self.primitives, *self.graph_levels]

    @property
    def depth(self) -> int:
        return len(self.graph_levels)

    @property
    def top(self) -> CompGraph:
        return self.graph_levels[-1][0]

    @property
    def motifs(self) -> tuple[CompGraph, ...]:
        return self.graph_levels[0] if self.depth > 1 else ()

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def to_dot(self) -> str:
        return "\n".join(graph_to_dot(graph) for table in self.graph_levels for graph in table)


def graph_to_dot(graph: CompGraph) -> str:
    name = graph.name or f"level{graph.level}"
    lines = [f'digraph "{name}" {{']
    lines.extend(f"  {n};" for n in graph.nodes)

    for edge in graph.edges:
        attr = ", ".join(f"{a:.4g}" for a in edge.attr)
        lines.append(f'  {edge.src} -> {edge.dst} [label="{edge.type_id} ({attr})"];')

    lines.append("}")
    return "\n".join(lines)


# canonical hashing


def _edge_label(edge: GraphEdge) -> str:
    return f"{edge.type_id}:" + ",".join(repr(float(a)) for a in edge.attr)


def _labelled_digraph(g: CompGraph) -> nx.DiGraph:
    """Collapse parallel edges into one edge labelled with the sorted multiset of their labels."""
    labels = defaultdict(list)

    for edge in g.edges:
        labels[(edge.src, edge.dst)].append(_edge_label(edge))

    graph = nx.DiGraph()
    graph.add_nodes_from(g.nodes)

    for (src, dst), edge_labels in sorted(labels.items()):
        graph.add_edge(src, dst, label="|".join(sorted(edge_labels)))

    for node in graph.nodes:
        graph.nodes[node]["label"] = f"{graph.in_degree(node)}/{graph.out_degree(node)}"

    return graph


def canonical_key(g: CompGraph) -> MotifKey:
    graph = _labelled_digraph(g)
    iterations = max(3, g.num_nodes)

    forward = nx.weisfeiler_lehman_graph_hash(graph, edge_attr="label", node_attr="label", iterations=iterations)
    backward = nx.weisfeiler_lehman_graph_hash(
        graph.reverse(copy=True), edge_attr="label", node_attr="label", iterations=iterations
    )
    edge_multiset = sorted(_edge_label(edge) for edge in g.edges)

    fingerprint = json.dumps([g.num_nodes, edge_multiset, forward, backward])
    return MotifKey(canonical_hash=blake2b(fingerprint.encode("ascii"), digest_size=16).hexdigest())


def same_motif(a: CompGraph, b: CompGraph) -> bool:
    if canonical_key(a) != canonical_key(b):
        return False

    match = lambda x, y: x["label"] == y["label"]  # noqa: E731
    return nx.is_isomorphic(_labelled_digraph(a), _labelled_digraph(b), node_match=match, edge_match=match)


def deduplicate(graphs: Sequence[CompGraph]) -> tuple[list[CompGraph], list[str], list[int]]:
    """Return the table of distinct graphs, their keys and the table index of every input graph."""
    table: list[CompGraph] = []
    keys: list[str] = []
    index: list[int] = []

    for graph in graphs:
        key = canonical_key(graph).canonical_hash
        found = next((i for i, k in enumerate(keys) if k == key and same_motif(table[i], graph)), None)

        if found is None:
            found = len(table)
            table.append(graph.model_copy(update={"name": f"motif{found}"}))
            keys.append(key)

        index.append(found)

    return table, keys, index


# lowering


class _BlockInstance:
    def __init__(self, m: ModelIR, block: BlockSpec):
        self.block = block
        self.members = set(block.layers)
        self.order = [layer_id for layer_id in m.topo_order if layer_id in self.members]

        try:
            self.output = m.block_output(block)
        except PruneSearchError as e:
            raise LowerError(str(e))


def _block_instances(m: ModelIR) -> list[_BlockInstance]:
    declared = [_BlockInstance(m, block) for block in m.blocks]
    covered = {layer_id for instance in declared for layer_id in instance.members}
    implicit = [
        _BlockInstance(m, BlockSpec(name=layer_id, layers=(layer_id,)))
        for layer_id in m.topo_order
        if layer_id not in covered
    ]

    instances = declared + implicit
    instances.sort(key=lambda instance: m.topo_index[instance.output])
    return instances


def _motif_graph(m: ModelIR, instance: _BlockInstance, primitives: PrimitiveTable, state_of) -> tuple:
    """Level-1 graph of one block and the ordered boundary states it reads from."""
    entries: list[int] = []
    local: dict[str, int] = {}
    edges = []

    for layer_id in instance.order:
        for producer in m.producers(layer_id) or [None]:
            if producer is None or producer not in instance.members:
                state = state_of(producer, instance)

                if state not in entries:
                    entries.append(state)

    for i, layer_id in enumerate(instance.order):
        local[layer_id] = len(entries) + i

    for layer_id in instance.order:
        layer = m.layer(layer_id)
        type_id = primitives.index(layer.kind)
        attr = tuple(float(v) for v in (*layer.kernel, *layer.stride))

        for producer in m.producers(layer_id) or [None]:
            if producer is not None and producer in instance.members:
                src = local[producer]
            else:
                src = entries.index(state_of(producer, instance))

            edges.append(GraphEdge(src=src, dst=local[layer_id], type_id=type_id, attr=attr))

    graph = CompGraph(level=1, num_nodes=len(entries) + len(instance.order), edges=tuple(edges))
    return graph, entries


def _normalizer(values: Sequence[float]):
    lo, hi = float(min(values)), float(max(values))

    if hi > lo:
        return lambda x: (x - lo) / (hi - lo)

    return lambda x: x / hi if hi != 0 else 0.0


def _block_geometry(m: ModelIR, instance: _BlockInstance) -> tuple[int, int]:
    spatial = [m.layer(layer_id) for layer_id in instance.order]
    spatial = [layer for layer in spatial if layer.kind in CONV_KINDS or layer.kind in POOL_KINDS]

    kernel_area = max((layer.kernel[0] * layer.kernel[1] for layer in spatial), default=1)
    stride = max((max(layer.stride) for layer in spatial), default=1)
    return kernel_area, stride


def _block_prune_ratio(m: ModelIR, instance: _BlockInstance) -> float:
    layers = [m.layer(layer_id) for layer_id in instance.order]
    layers = [layer for layer in layers if layer.kind in PRUNABLE_KINDS]
    base = sum(layer.base_channels for layer in layers)

    if base == 0:
        return 0.0

    return 1.0 - sum(layer.out_channels for layer in layers) / base


def lower(m: ModelIR, primitives: PrimitiveTable | None = None) -> HierGraph:
    primitives = primitives or PrimitiveTable()

    for layer in m.layers:
        primitives.index(layer.kind)

    instances = _block_instances(m)
    # node 0 is the model input, node i + 1 the output of instance i
    state_by_output = {instance.output: i + 1 for i, instance in enumerate(instances)}
    block_by_layer = {layer_id: instance for instance in instances for layer_id in instance.members}

    def state_of(producer: str | None, reader: _BlockInstance) -> int:
        if producer is None:
            return 0

        if producer not in state_by_output:
            owner = block_by_layer[producer].block.name
            raise LowerError(f"block {reader.block.name} reads layer {producer} from inside block {owner}")

        return state_by_output[producer]

    motif_graphs, entries = [], []
    for instance in instances:
        graph, instance_entries = _motif_graph(m, instance, primitives, state_of)
        motif_graphs.append(graph)
        entries.append(instance_entries)

    table, keys, motif_index = deduplicate(motif_graphs)

    # channel counts of every boundary state, current and before pruning
    current = [m.input_shape[0]] + [m.layer(instance.output).out_channels for instance in instances]
    base = [m.input_shape[0]] + [m.layer(instance.output).base_channels for instance in instances]
    channels = _normalizer(base)

    geometry = [_block_geometry(m, instance) for instance in instances]
    kernel_area = _normalizer([g[0] for g in geometry])
    stride = _normalizer([g[1] for g in geometry])

    edges = []
    for i, instance in enumerate(instances):
        exit_state = i + 1
        ratio = _block_prune_ratio(m, instance)

        for entry in entries[i]:
            attr = (
                channels(current[entry]),
                channels(current[exit_state]),
                kernel_area(geometry[i][0]),
                stride(geometry[i][1]),
                ratio,
            )
            edges.append(GraphEdge(src=entry, dst=exit_state, type_id=motif_index[i], attr=tuple(map(float, attr))))

    top = CompGraph(level=2, num_nodes=len(instances) + 1, edges=tuple(edges), name=m.name)

    return HierGraph(
        primitives=primitives,
        graph_levels=(tuple(table), (top,)),
        keys=(tuple(keys), (TOP_KEY,)),
    )
