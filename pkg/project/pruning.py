"""Structured channel pruning of a ModelIR.

A pruning unit is either a share group or a single prunable layer; all members of a unit keep the same channel
indices. Kept indices are propagated forward through every layer so that consumer weights can be sliced consistently.
"""

import csv
import io
import json
import logging
import math
from typing import Annotated, Sequence

import networkx as nx
import numpy as np
from pydantic import Field, model_validator

from project.config import FrozenBaseModel
from project.errors import PolicyError, StrategyError
from project.model_ir import (
    CHANNEL_PRESERVING_KINDS,
    BlockKind,
    LayerKind,
    LayerSpec,
    ModelIR,
    build_model,
)
from project.numerics.functional import channel_shuffle_permutation

logger = logging.getLogger(__name__)

DEFAULT_A_MAX = 0.8


class PruningPolicy(FrozenBaseModel):
    ratios: dict[str, float]
    a_max: Annotated[float, Field(gt=0, lt=1)] = DEFAULT_A_MAX

    @model_validator(mode="after")
    def _check_ratios(self):
        for layer_id, ratio in self.ratios.items():
            if not 0 <= ratio <= self.a_max:
                raise ValueError(f"ratio {ratio} for layer {layer_id} is outside [0, {self.a_max}]")

        return self

    def to_json(self) -> str:
        return ratios_json(self.ratios)

    def to_csv(self) -> str:
        return ratios_csv(self.ratios)


def ratios_json(ratios: dict[str, float]) -> str:
    return json.dumps(dict(sorted(ratios.items())), indent=2)


def ratios_csv(ratios: dict[str, float]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["layer", "ratio"])

    for layer_id, ratio in sorted(ratios.items()):
        writer.writerow([layer_id, repr(float(ratio))])

    return buffer.getvalue()


def zero_policy(m: ModelIR, a_max: float = DEFAULT_A_MAX) -> PruningPolicy:
    return PruningPolicy(ratios={layer.id: 0.0 for layer in m.layers if layer.prunable}, a_max=a_max)


def effective_ratios(m: ModelIR) -> dict[str, float]:
    """Overall ratio 1 - kept/base of every prunable layer; composes the ratios of a multi-step episode."""
    return {layer.id: 1 - layer.out_channels / layer.base_channels for layer in m.layers if layer.prunable}


# agent slots and per-architecture strategies


def _strategy_allows(m: ModelIR, layer: LayerSpec) -> bool:
    if not layer.prunable:
        return False

    block = m.block_of(layer.id)

    if block is None or block.kind in (BlockKind.plain, BlockKind.residual):
        return True

    if block.kind == BlockKind.mobile_v1:
        return layer.kind == LayerKind.pointwise_conv2d

    if block.kind == BlockKind.mobile_v2:
        return layer.kind == LayerKind.pointwise_conv2d or layer.id == m.expansion_layer(block)

    if block.kind == BlockKind.shuffle:
        return layer.id != m.expansion_layer(block)

    return False


def agent_slots(m: ModelIR) -> list[tuple[str, ...]]:
    """Agent-controlled slots in topological order of their first member. Members of a slot share one ratio:
    share groups are tied, and so are the expansion layers of all mobile_v2 blocks."""
    eligible = {layer.id for layer in m.layers if _strategy_allows(m, layer)}

    for group in m.share_groups:
        if not all(member in eligible for member in group):
            eligible.difference_update(group)

    uf = nx.utils.UnionFind()

    for layer_id in sorted(eligible):
        uf.union(layer_id)

    for group in m.share_groups:
        if group[0] in eligible:
            uf.union(*group)

    expansions = [
        m.expansion_layer(block)
        for block in m.blocks
        if block.kind == BlockKind.mobile_v2 and m.expansion_layer(block) in eligible
    ]
    if expansions:
        uf.union(*expansions)

    slots = [tuple(sorted(component, key=m.topo_index.__getitem__)) for component in uf.to_sets()]
    slots.sort(key=lambda slot: m.topo_index[slot[0]])

    return slots


def strategy_ratios(m: ModelIR, raw: Sequence[float], a_max: float = DEFAULT_A_MAX) -> PruningPolicy:
    slots = agent_slots(m)
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)

    if len(raw) != len(slots):
        raise StrategyError(f"expected {len(slots)} agent outputs, got {len(raw)}")

    if not np.all(np.isfinite(raw)):
        raise StrategyError("agent outputs must be finite")

    ratios = {}

    for value, slot in zip(np.clip(raw, 0.0, a_max), slots):
        for layer_id in slot:
            ratios[layer_id] = float(value)

    return PruningPolicy(ratios=ratios, a_max=a_max)


# channel selection


def keep_count(channels: int, ratio: float, granularity: int = 1) -> int:
    """max(q, round_half_up((1 - ratio) * channels / q) * q) for channel granularity q."""
    units = channels // granularity
    kept_units = max(1, math.floor((1 - ratio) * units + 0.5))

    return kept_units * granularity


def channel_importance(m: ModelIR, unit: Sequence[str]) -> np.ndarray | None:
    """Summed L2 norm of every member's output filters, or None without weights."""
    layers = [m.layer(layer_id) for layer_id in unit]

    if any(layer.weights is None for layer in layers):
        return None

    return sum(np.linalg.norm(layer.weights["weight"].reshape(layer.out_channels, -1), axis=1) for layer in layers)


def select_channels(importance: np.ndarray | None, channels: int, keep: int, slices: int = 1) -> np.ndarray:
    """Keep the same number of channels in each of `slices` contiguous slices. Within a slice the most important
    channels survive (lower index first on ties); without importance the lowest indices survive."""
    size = channels // slices
    per_slice = keep // slices
    kept = []

    for s in range(slices):
        lo = s * size

        if importance is None:
            kept.append(np.arange(lo, lo + per_slice))
        else:
            local = importance[lo : lo + size]
            order = np.lexsort((np.arange(size), -local))
            kept.append(lo + np.sort(order[:per_slice]))

    return np.concatenate(kept).astype(np.int64)


def channel_granularity(m: ModelIR, unit: Sequence[str]) -> int:
    """Smallest channel multiple that keeps every grouped convolution and channel shuffle downstream consistent."""
    q = 1
    stack = []

    for layer_id in unit:
        layer = m.layer(layer_id)
        q = math.lcm(q, layer.groups)
        stack.extend((consumer, 1) for consumer in m.consumers(layer_id))

    seen = set()

    while stack:
        layer_id, factor = stack.pop()

        if (layer_id, factor) in seen:
            continue

        seen.add((layer_id, factor))
        layer = m.layer(layer_id)

        if layer.kind in (LayerKind.conv2d, LayerKind.pointwise_conv2d):
            if layer.groups > 1:
                q = math.lcm(q, layer.groups * factor)
            continue

        if layer.kind == LayerKind.channel_shuffle:
            q = math.lcm(q, layer.groups * factor)
            factor *= layer.groups
        elif layer.kind not in CHANNEL_PRESERVING_KINDS and layer.kind not in (LayerKind.add, LayerKind.concat):
            continue

        stack.extend((consumer, factor) for consumer in m.consumers(layer_id))

    channels = m.layer(unit[0]).out_channels
    return q if channels % q == 0 else math.gcd(q, channels)


def pruning_units(m: ModelIR) -> list[tuple[str, ...]]:
    units = list(m.share_groups)
    grouped = set(m.share_group_of)
    units.extend((layer.id,) for layer in m.layers if layer.prunable and layer.id not in grouped)
    return [unit for unit in units if all(m.layer(layer_id).prunable for layer_id in unit)]


def _validate_policy(m: ModelIR, p: PruningPolicy):
    for layer_id in p.ratios:
        if layer_id not in m.layer_map:
            raise PolicyError(f"policy references unknown layer {layer_id}")

        if not m.layer(layer_id).prunable:
            raise PolicyError(f"layer {layer_id} is not prunable")

    for group in m.share_groups:
        ratios = {p.ratios.get(layer_id, 0.0) for layer_id in group}

        if len(ratios) > 1:
            raise PolicyError(f"share group {list(group)} has different ratios {sorted(ratios)}")


def apply_policy(m: ModelIR, p: PruningPolicy) -> ModelIR:
    """Prune output channels of every prunable layer and propagate the kept indices to all consumers."""
    _validate_policy(m, p)
    keep_sets: dict[str, np.ndarray] = {}

    for unit in pruning_units(m):
        ratio = p.ratios.get(unit[0], 0.0)
        channels = m.layer(unit[0]).out_channels
        q = channel_granularity(m, unit)
        keep = keep_count(channels, ratio, q)

        if keep >= channels:
            continue

        kept = select_channels(channel_importance(m, unit), channels, keep, q)
        logger.debug(f"Pruning {list(unit)}: keeping {keep} of {channels} channels.")

        for layer_id in unit:
            keep_sets[layer_id] = kept

    if not keep_sets:
        return m

    kept_out: dict[str, np.ndarray | None] = {}
    layers: dict[str, LayerSpec] = {}

    for layer_id in m.topo_order:
        layer = m.layer(layer_id)
        inputs = [kept_out[p] for p in m.producers(layer_id)] or [None]
        layers[layer_id], kept_out[layer_id] = _prune_layer(m, layer, inputs, keep_sets.get(layer_id))

    return build_model(
        input_shape=m.input_shape,
        layers=[layers[layer.id] for layer in m.layers],
        edges=m.edges,
        blocks=m.blocks,
        share_groups=m.share_groups,
        name=m.name,
    )


def _prune_layer(m: ModelIR, layer: LayerSpec, inputs: list, out_keep: np.ndarray | None):
    kind = layer.kind
    in_keep = inputs[0]
    weights = layer.weights

    if kind in (LayerKind.conv2d, LayerKind.pointwise_conv2d):
        if in_keep is None and out_keep is None:
            return layer, None

        in_channels = layer.in_channels if in_keep is None else len(in_keep)
        out_channels = layer.out_channels if out_keep is None else len(out_keep)

        if weights is not None:
            weights = _slice_conv(layer, in_keep, out_keep)

        update = {"in_channels": in_channels, "out_channels": out_channels, "weights": weights}
        return _pruned(layer, update), out_keep

    if kind == LayerKind.depthwise_conv2d:
        if in_keep is None:
            return layer, None

        if weights is not None:
            weights = {name: w[in_keep] for name, w in weights.items()}

        channels = len(in_keep)
        update = {"in_channels": channels, "out_channels": channels, "groups": channels, "weights": weights}
        return _pruned(layer, update), in_keep

    if kind == LayerKind.batchnorm:
        if in_keep is None:
            return layer, None

        if weights is not None:
            weights = {name: w[in_keep] for name, w in weights.items()}

        return _pruned(layer, {"in_channels": len(in_keep), "out_channels": len(in_keep), "weights": weights}), in_keep

    if kind == LayerKind.dense:
        if in_keep is None:
            return layer, None

        if weights is not None:
            weights = {"weight": weights["weight"][:, in_keep], "bias": weights["bias"]}

        return _pruned(layer, {"in_channels": len(in_keep), "weights": weights}), None

    if kind == LayerKind.add:
        if all(k is None for k in inputs):
            return layer, None

        if any(k is None or not np.array_equal(k, in_keep) for k in inputs):
            raise PolicyError(f"add layer {layer.id} joins branches with different kept channels")

        return _resized(layer, len(in_keep)), in_keep

    if kind == LayerKind.concat:
        if all(k is None for k in inputs):
            return layer, None

        parts, offset = [], 0
        for producer, k in zip(m.producers(layer.id), inputs):
            channels = m.shapes[producer][0]
            parts.append(offset + (np.arange(channels) if k is None else k))
            offset += channels

        kept = np.concatenate(parts)
        return _resized(layer, len(kept)), kept

    if kind == LayerKind.channel_shuffle:
        if in_keep is None:
            return layer, None

        # the pruned shuffle permutes the surviving channels; map each new position back to its original one
        inverse = np.argsort(channel_shuffle_permutation(layer.in_channels, layer.groups))
        permutation = channel_shuffle_permutation(len(in_keep), layer.groups)
        return _resized(layer, len(in_keep)), inverse[in_keep[permutation]]

    if kind == LayerKind.flatten:
        if in_keep is None:
            return layer, None

        c, h, w = m.input_shape_of(layer.id)
        kept = (in_keep[:, None] * (h * w) + np.arange(h * w)[None, :]).reshape(-1)
        return layer.model_copy(update={"in_channels": len(in_keep), "out_channels": len(kept)}), kept

    # relu, pooling, global average pooling
    if in_keep is None:
        return layer, None

    return _resized(layer, len(in_keep)), in_keep


def _resized(layer: LayerSpec, channels: int) -> LayerSpec:
    return layer.model_copy(update={"in_channels": channels, "out_channels": channels})


def _pruned(layer: LayerSpec, update: dict) -> LayerSpec:
    changed = update["in_channels"] != layer.in_channels or update.get("out_channels", layer.out_channels) != (
        layer.out_channels
    )
    return layer.model_copy(update={**update, "pruned": layer.pruned or changed})


def _slice_conv(layer: LayerSpec, in_keep: np.ndarray | None, out_keep: np.ndarray | None) -> dict[str, np.ndarray]:
    weight, bias = layer.weights["weight"], layer.weights["bias"]
    out_keep = np.arange(layer.out_channels) if out_keep is None else out_keep
    in_keep = np.arange(layer.in_channels) if in_keep is None else in_keep

    groups = layer.groups
    in_per_group = layer.in_channels // groups
    out_per_group = layer.out_channels // groups
    new_in_per_group = len(in_keep) // groups
    new_out_per_group = len(out_keep) // groups

    if len(in_keep) % groups != 0 or len(out_keep) % groups != 0:
        raise PolicyError(f"layer {layer.id}: kept channels are not divisible by {groups} groups")

    sliced = np.empty((len(out_keep), new_in_per_group, *weight.shape[2:]), dtype=np.float64)

    for new_o, o in enumerate(out_keep):
        group = o // out_per_group

        if new_o // new_out_per_group != group:
            raise PolicyError(f"layer {layer.id}: kept output channels are not balanced across groups")

        columns = in_keep[group * new_in_per_group : (group + 1) * new_in_per_group]

        if np.any(columns // in_per_group != group):
            raise PolicyError(f"layer {layer.id}: kept input channels are not balanced across groups")

        sliced[new_o] = weight[o, columns - group * in_per_group]

    return {"weight": sliced, "bias": bias[out_keep]}

