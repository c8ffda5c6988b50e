import logging

from pydantic import BaseModel

from project.config import Settings
from project.dependencies import get_dataset, get_model
from project.model_ir import save_model
from project.oracle import evaluate, fit

logger = logging.getLogger(__name__)

FINETUNED_MODEL = "finetuned_model.json"
FINETUNED_WEIGHTS = "finetuned_weights.bin"


class FinetuneReport(BaseModel):
    model: str
    epochs: int
    freeze_unpruned: bool
    train_accuracy: list[float]
    accuracy_before: float
    accuracy_after: float
    weights: str


def cmd_finetune(settings: Settings) -> FinetuneReport:
    """Retrain a pruned model. By default only the layers whose width pruning changed are updated."""
    m = get_model(settings, require_weights=True)
    dataset = get_dataset(settings, m)
    before = evaluate(m, dataset, "validation")

    tuned, history = fit(m, dataset, settings.finetune)
    weights_path = settings.out / FINETUNED_WEIGHTS
    save_model(tuned, settings.out / FINETUNED_MODEL, weights_path)

    report = FinetuneReport(
        model=m.name,
        epochs=settings.finetune.epochs,
        freeze_unpruned=settings.finetune.freeze_unpruned,
        train_accuracy=history,
        accuracy_before=before,
        accuracy_after=evaluate(tuned, dataset, "validation"),
        weights=str(weights_path),
    )
    logger.info(
        f"Fine-tuned {m.name}: validation accuracy {before:.4f} -> {report.accuracy_after:.4f}.",
        extra={"accuracy_before": before, "accuracy_after": report.accuracy_after},
    )
    return report
