from project.config import FrozenBaseModel
from project.model_ir import CONV_KINDS, LayerKind, ModelIR


class FlopsReport(FrozenBaseModel):
    per_layer: dict[str, int]
    total: int
    prunable_total: int


class ParamsReport(FrozenBaseModel):
    per_layer: dict[str, int]
    total: int


def count_flops(m: ModelIR) -> FlopsReport:
    """Two operations per multiply-accumulate for convolutions and dense layers; everything else counts as zero."""
    per_layer = {}

    for layer in m.layers:
        if layer.kind in CONV_KINDS:
            kh, kw = layer.kernel
            _, h_out, w_out = m.shapes[layer.id]
            flops = 2 * kh * kw * (layer.in_channels // layer.groups) * layer.out_channels * h_out * w_out
        elif layer.kind == LayerKind.dense:
            flops = 2 * layer.in_channels * layer.out_channels
        else:
            flops = 0

        per_layer[layer.id] = flops

    return FlopsReport(
        per_layer=per_layer,
        total=sum(per_layer.values()),
        prunable_total=sum(per_layer[layer.id] for layer in m.layers if layer.prunable),
    )


def count_params(m: ModelIR) -> ParamsReport:
    per_layer = {}

    for layer in m.layers:
        if layer.kind in CONV_KINDS:
            kh, kw = layer.kernel
            params = layer.out_channels * (layer.in_channels // layer.groups) * kh * kw + layer.out_channels
        elif layer.kind == LayerKind.dense:
            params = layer.in_channels * layer.out_channels + layer.out_channels
        elif layer.kind == LayerKind.batchnorm:
            params = 2 * layer.out_channels
        else:
            params = 0

        per_layer[layer.id] = params

    return ParamsReport(per_layer=per_layer, total=sum(per_layer.values()))


def flops_ratio(m: ModelIR, reference: ModelIR | int) -> float:
    """Preserved FLOPs of `m` relative to `reference` (a model or a precomputed total)."""
    baseline = reference if isinstance(reference, int) else count_flops(reference).total

    if baseline == 0:
        return 1.0

    return count_flops(m).total / baseline
