import logging

from pydantic import BaseModel

from project.config import Settings
from project.dependencies import get_model
from project.flops import count_flops, count_params
from project.model_ir import ModelIR
from project.pruning import agent_slots

logger = logging.getLogger(__name__)


class LayerRow(BaseModel):
    id: str
    kind: str
    in_channels: int | None
    out_channels: int | None
    flops: int
    params: int


class AnalysisReport(BaseModel):
    model: str
    total_flops: int
    prunable_flops: int
    total_params: int
    per_layer_flops: dict[str, int]
    # one row per prunable layer
    layers: list[LayerRow]
    slots: list[list[str]]


def analyze(m: ModelIR) -> AnalysisReport:
    flops = count_flops(m)
    params = count_params(m)

    rows = [
        LayerRow(
            id=layer.id,
            kind=layer.kind.value,
            in_channels=layer.in_channels,
            out_channels=layer.out_channels,
            flops=flops.per_layer[layer.id],
            params=params.per_layer[layer.id],
        )
        for layer in m.layers
        if layer.prunable
    ]

    return AnalysisReport(
        model=m.name,
        total_flops=flops.total,
        prunable_flops=flops.prunable_total,
        total_params=params.total,
        per_layer_flops=flops.per_layer,
        layers=rows,
        slots=[list(slot) for slot in agent_slots(m)],
    )


def format_table(report: AnalysisReport) -> str:
    header = f"{'layer':<20} {'kind':<18} {'in':>6} {'out':>6} {'FLOPs':>14} {'params':>10}"
    lines = [header, "-" * len(header)]

    for row in report.layers:
        lines.append(
            f"{row.id:<20} {row.kind:<18} {row.in_channels or '-':>6} {row.out_channels or '-':>6} "
            f"{row.flops:>14,} {row.params:>10,}"
        )

    lines.append("-" * len(header))
    lines.append(f"total FLOPs {report.total_flops:,} (prunable {report.prunable_flops:,})")
    lines.append(f"total params {report.total_params:,}, {len(report.slots)} agent slots")
    return "\n".join(lines)


def cmd_analyze(settings: Settings) -> AnalysisReport:
    report = analyze(get_model(settings))
    logger.info(f"Analyzed model {report.model}: {report.total_flops} FLOPs.", extra={"flops": report.total_flops})
    return report
