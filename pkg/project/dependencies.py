import logging

from project.agent import DDPGAgent, RandomSearchAgent
from project.config import Settings
from project.datasets import Dataset, load_dataset
from project.errors import ConfigError
from project.hgraph import lower
from project.model_ir import ModelIR, load_model
from project.oracle import Oracle
from project.pruning import agent_slots

logger = logging.getLogger(__name__)


def get_model(settings: Settings, require_weights: bool = False) -> ModelIR:
    if settings.model is None:
        raise ConfigError("no model was given, pass --model")

    if not settings.model.is_file():
        raise ConfigError(f"model {settings.model} does not exist")

    if settings.weights is None:
        if require_weights:
            raise ConfigError("this command needs trained weights, pass --weights")

        logger.info("No weights were given, the model is used symbolically.")
        return load_model(settings.model)

    if not settings.weights.is_file():
        raise ConfigError(f"weights {settings.weights} do not exist")

    return load_model(settings.model, settings.weights)


def get_dataset(settings: Settings, m: ModelIR) -> Dataset:
    if settings.dataset is None:
        raise ConfigError("no dataset was given, pass --dataset")

    try:
        return load_dataset(settings.dataset, m.input_shape, settings.data)
    except FileNotFoundError as e:
        raise ConfigError(str(e))


def get_oracle(settings: Settings, dataset: Dataset) -> Oracle:
    # the per-reward fine-tune only touches layers changed by pruning
    fine_tune = settings.reward_finetune.model_copy(
        update={"epochs": settings.env.fine_tune_epochs_per_reward, "freeze_unpruned": True}
    )
    return Oracle(dataset, fine_tune if fine_tune.epochs > 0 else None)


def get_agent(settings: Settings, m: ModelIR, random_search: bool = False) -> DDPGAgent | RandomSearchAgent:
    slots = len(agent_slots(m))

    if slots == 0:
        raise ConfigError(f"model {m.name} has no layer the pruning strategies allow to prune")

    if random_search:
        return RandomSearchAgent(slots, settings.agent.a_max, seed=settings.seed)

    return DDPGAgent(
        lower(m), slots, settings.agent, settings.encoder, settings.env.warmup_episodes, seed=settings.seed
    )
