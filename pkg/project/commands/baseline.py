import logging

from pydantic import BaseModel

from project.config import Settings
from project.dependencies import get_dataset, get_model
from project.model_ir import save_model
from project.oracle import evaluate, fit

logger = logging.getLogger(__name__)

BASELINE_WEIGHTS = "baseline_weights.bin"


class BaselineReport(BaseModel):
    model: str
    epochs: int
    train_accuracy: list[float]
    validation_accuracy: float
    test_accuracy: float
    weights: str


def cmd_train_baseline(settings: Settings) -> BaselineReport:
    """Train the model from scratch (or from the given weights) and persist the weights sidecar.
    Zero epochs persist the initializer weights."""
    m = get_model(settings)
    dataset = get_dataset(settings, m)

    trained, history = fit(m, dataset, settings.baseline)
    weights_path = settings.out / BASELINE_WEIGHTS
    save_model(trained, settings.out / f"{m.name}.json", weights_path)

    report = BaselineReport(
        model=m.name,
        epochs=settings.baseline.epochs,
        train_accuracy=history,
        validation_accuracy=evaluate(trained, dataset, "validation"),
        test_accuracy=evaluate(trained, dataset, "test"),
        weights=str(weights_path),
    )
    logger.info(
        f"Baseline {m.name}: validation accuracy {report.validation_accuracy:.4f}.",
        extra={"accuracy": report.validation_accuracy},
    )
    return report
