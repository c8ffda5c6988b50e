"""Multi-stage graph encoder.

Every level of a HierGraph is embedded in turn. Graphs of one level share that level's message-passing weights;
the embeddings of a level become the edge features of the level above. Each graph is read out with its own
learnable pooling coefficients.
"""

import logging
from typing import Sequence

import numpy as np

from project.config import EncoderConfig
from project.errors import DimError, MissingParamsError
from project.hgraph import CompGraph, HierGraph
from project.numerics import functional as F
from project.numerics.module import Module, parameter, uniform_init
from project.numerics.tensor import Tensor

logger = logging.getLogger(__name__)


def _aggregation_matrix(num_nodes: int, dst: np.ndarray) -> np.ndarray:
    """Row i averages the messages of the edges entering node i, with c_i = max(1, in-degree)."""
    matrix = np.zeros((num_nodes, len(dst)))
    matrix[dst, np.arange(len(dst))] = 1.0
    return matrix / np.maximum(1.0, matrix.sum(axis=1, keepdims=True))


def _propagate(
    h: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    num_nodes: int,
    edge_features: Tensor | None,
    weight: Tensor,
) -> Tensor:
    messages = F.take(h, src, axis=0)

    if edge_features is not None:
        messages = messages * edge_features

    aggregated = Tensor(_aggregation_matrix(num_nodes, dst)) @ messages
    return F.relu(aggregated @ weight)


def _edge_index(g: CompGraph) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([e.src for e in g.edges], dtype=np.int64)
    dst = np.array([e.dst for e in g.edges], dtype=np.int64)
    return src, dst


def _check_states(g: CompGraph, h: Tensor, weight: Tensor):
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise DimError(f"expected one state row per node ({g.num_nodes}), got {h.shape}")

    if weight.ndim != 2 or weight.shape[0] != h.shape[1]:
        raise DimError(f"weight {weight.shape} does not match hidden dimension {h.shape[1]}")


def message_pass(g: CompGraph, h: Tensor, edge_features: Tensor, weight: Tensor) -> Tensor:
    """h_i' = relu(sum_{edges j->i} (h_j * e_k) @ W / c_i)."""
    _check_states(g, h, weight)

    if edge_features.shape != (len(g.edges), h.shape[1]):
        raise DimError(f"expected edge features of shape {(len(g.edges), h.shape[1])}, got {edge_features.shape}")

    src, dst = _edge_index(g)
    return _propagate(h, src, dst, g.num_nodes, edge_features, weight)


def gcn_pass(g: CompGraph, h: Tensor, weight: Tensor) -> Tensor:
    """Message passing without edge features."""
    _check_states(g, h, weight)
    src, dst = _edge_index(g)
    return _propagate(h, src, dst, g.num_nodes, None, weight)


def pool(g: CompGraph, h: Tensor, alpha: Tensor) -> Tensor:
    """Graph embedding e = sum_i alpha_i h_i."""
    if alpha.shape != (g.num_nodes,):
        raise DimError(f"expected {g.num_nodes} pooling coefficients, got {alpha.shape}")

    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise DimError(f"expected one state row per node ({g.num_nodes}), got {h.shape}")

    return (alpha.reshape(1, g.num_nodes) @ h).reshape(h.shape[1])


class LevelParams(Module):
    """Weights shared by all graphs of one hierarchy level."""

    def __init__(self, hidden_dim: int, rounds: int, attr_dim: int, num_types: int | None, rng: np.random.Generator):
        self.weights = [parameter(uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)) for _ in range(rounds)]
        self.attr_proj = parameter(uniform_init(rng, (attr_dim, hidden_dim), max(attr_dim, 1)))
        # starts as an identity modulation of the lower-level embedding
        self.attr_bias = parameter(np.ones(hidden_dim))
        self.type_proj = None if num_types is None else parameter(uniform_init(rng, (num_types, hidden_dim), num_types))

    @property
    def attr_dim(self) -> int:
        return self.attr_proj.shape[0]


class StageParams(Module):
    def __init__(self, hidden_dim: int, num_message_rounds: int, levels: list[LevelParams], alphas: dict[str, Tensor]):
        if hidden_dim < 1:
            raise DimError("hidden_dim must be at least 1")

        self.hidden_dim = hidden_dim
        self.num_message_rounds = num_message_rounds
        self.levels = levels
        self.alphas = alphas

    @classmethod
    def initialize(cls, hg: HierGraph, config: EncoderConfig, rng: np.random.Generator) -> "StageParams":
        """Parameters for every level of `hg` and an all-ones pooling vector for each of its graphs."""
        levels = []

        for t, table in enumerate(hg.graph_levels):
            attr_dim = max((graph.attr_dim for graph in table), default=0)
            num_types = len(hg.primitives) if t == 0 else None
            levels.append(LevelParams(config.hidden_dim, config.num_message_rounds, attr_dim, num_types, rng))

        alphas = {}
        for table, keys in zip(hg.graph_levels, hg.keys):
            for graph, key in zip(table, keys):
                alphas.setdefault(key, parameter(np.ones(graph.num_nodes)))

        return cls(config.hidden_dim, config.num_message_rounds, levels, alphas)

    def alpha(self, key: str, num_nodes: int) -> Tensor:
        if key not in self.alphas:
            raise MissingParamsError(f"no pooling coefficients for graph {key}")

        if self.alphas[key].shape != (num_nodes,):
            logger.warning(f"Graph {key} changed size to {num_nodes} nodes, resetting its pooling coefficients.")
            self.alphas[key] = parameter(np.ones(num_nodes))

        return self.alphas[key]


def edge_features(
    g: CompGraph,
    level: LevelParams,
    lower_embeddings: Tensor | None,
) -> Tensor:
    """Lower-level embedding of every edge's type, modulated by the projected edge attributes."""
    type_ids = np.array([e.type_id for e in g.edges], dtype=np.int64)
    base_table = level.type_proj if lower_embeddings is None else lower_embeddings
    base = F.take(base_table, type_ids, axis=0)

    if g.edges and g.attr_dim != level.attr_dim:
        raise DimError(f"graph {g.name} has {g.attr_dim} edge attributes, parameters expect {level.attr_dim}")

    attrs = Tensor(np.array([e.attr for e in g.edges], dtype=np.float64).reshape(len(g.edges), level.attr_dim))
    return base * (attrs @ level.attr_proj + level.attr_bias)


def encode_graph(
    g: CompGraph,
    level: LevelParams,
    lower_embeddings: Tensor | None,
    alpha: Tensor,
    hidden_dim: int,
) -> Tensor:
    """Embed one graph: residual message passing rounds from all-ones node states, then pooling.

    Each round adds the aggregated messages to the node state, so a node without incoming edges keeps its state.
    """
    h = Tensor(np.ones((g.num_nodes, hidden_dim)))
    features = edge_features(g, level, lower_embeddings)

    for weight in level.weights:
        h = h + message_pass(g, h, features, weight)

    return pool(g, h, alpha)


def _check_levels(hg: HierGraph, params: StageParams):
    if len(params.levels) < hg.depth:
        raise MissingParamsError(f"parameters cover {len(params.levels)} levels, the hierarchy has {hg.depth}")

    if params.levels[0].type_proj is None or params.levels[0].type_proj.shape[0] != len(hg.primitives):
        raise MissingParamsError("parameters do not cover the primitive table")


def encode_batch(hgs: Sequence[HierGraph], params: StageParams) -> Tensor:
    """Embeddings (batch, hidden_dim) of several hierarchies. Below the top level every distinct graph is encoded
    once per call however often it is referenced; the top graphs are encoded together as one disjoint union."""
    cache: dict[tuple, Tensor] = {}
    tables: list[Tensor | None] = []

    for hg in hgs:
        _check_levels(hg, params)
        lower, lower_keys = None, ()

        for t in range(hg.depth - 1):
            embeddings = []

            for graph, key in zip(hg.graph_levels[t], hg.keys[t]):
                cache_key = (t, key, lower_keys)

                if cache_key not in cache:
                    alpha = params.alpha(key, graph.num_nodes)
                    cache[cache_key] = encode_graph(graph, params.levels[t], lower, alpha, params.hidden_dim)

                embeddings.append(cache[cache_key].reshape(1, params.hidden_dim))

            lower = F.concat(embeddings, axis=0)
            lower_keys = tuple(hg.keys[t])

        tables.append(lower)

    return _encode_tops(hgs, params, tables)


def _encode_tops(hgs: Sequence[HierGraph], params: StageParams, tables: list[Tensor | None]) -> Tensor:
    depth = hgs[0].depth
    if any(hg.depth != depth for hg in hgs):
        raise DimError("all hierarchies of a batch must have the same depth")

    level = params.levels[depth - 1]
    src, dst, features, alphas = [], [], [], []
    offset = 0

    for hg, lower in zip(hgs, tables):
        top = hg.top
        graph_src, graph_dst = _edge_index(top)
        src.append(graph_src + offset)
        dst.append(graph_dst + offset)
        features.append(edge_features(top, level, lower))
        alphas.append(params.alpha(hg.keys[-1][0], top.num_nodes))
        offset += top.num_nodes

    src, dst = np.concatenate(src), np.concatenate(dst)
    features = F.concat(features, axis=0)
    h = Tensor(np.ones((offset, params.hidden_dim)))

    for weight in level.weights:
        h = h + _propagate(h, src, dst, offset, features, weight)

    # segment matrix selects the nodes of each graph
    segments = np.zeros((len(hgs), offset))
    start = 0
    for i, hg in enumerate(hgs):
        segments[i, start : start + hg.top.num_nodes] = 1.0
        start += hg.top.num_nodes

    weighted = h * F.concat(alphas, axis=0).reshape(offset, 1)
    return Tensor(segments) @ weighted


def encode(hg: HierGraph, params: StageParams) -> Tensor:
    return encode_batch([hg], params).reshape(params.hidden_dim)


class MultiStageEncoder(Module):
    def __init__(self, params: StageParams):
        self.params = params

    @classmethod
    def for_hierarchy(cls, hg: HierGraph, config: EncoderConfig, rng: np.random.Generator) -> "MultiStageEncoder":
        return cls(StageParams.initialize(hg, config, rng))

    @property
    def hidden_dim(self) -> int:
        return self.params.hidden_dim

    def __call__(self, hgs: Sequence[HierGraph]) -> Tensor:
        return encode_batch(hgs, self.params)
