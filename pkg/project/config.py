from enum import Enum
from pathlib import Path
from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import (
    BaseSettings,
    JsonConfigSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)


class FrozenBaseModel(BaseModel):
    model_config = ConfigDict(frozen=True)


class OptimizerKind(str, Enum):
    sgd_momentum = "sgd_momentum"
    adam = "adam"


class OptimizerConfig(FrozenBaseModel):
    kind: OptimizerKind = OptimizerKind.adam
    lr: Annotated[float, Field(gt=0)] = 1e-3
    momentum: Annotated[float, Field(ge=0, lt=1)] = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: Annotated[float, Field(ge=0)] = 0.0


class TrainConfig(FrozenBaseModel):
    epochs: Annotated[int, Field(ge=0)] = 20
    batch_size: Annotated[int, Field(ge=1)] = 32
    optimizer: Annotated[OptimizerConfig, Field(default_factory=OptimizerConfig)]
    seed: int = 0
    freeze_unpruned: bool = False


class FinetuneConfig(TrainConfig):
    """Retraining of a pruned network; only layers changed by pruning are updated by default."""

    epochs: Annotated[int, Field(ge=0)] = 10
    freeze_unpruned: bool = True


class RewardFinetuneConfig(TrainConfig):
    epochs: Annotated[int, Field(ge=0)] = 1


class EncoderConfig(FrozenBaseModel):
    hidden_dim: Annotated[int, Field(ge=1)] = 32
    num_message_rounds: Annotated[int, Field(ge=1)] = 3


class AgentConfig(FrozenBaseModel):
    a_max: Annotated[float, Field(gt=0, lt=1)] = 0.8
    head_hidden: Annotated[int, Field(ge=1)] = 64
    tau: Annotated[float, Field(gt=0, le=1)] = 0.01
    gamma: Annotated[float, Field(ge=0, le=1)] = 1.0
    # defaults to 0.25 * a_max when unset
    sigma0: Annotated[float | None, Field(gt=0)] = None
    sigma_decay: Annotated[float, Field(gt=0, le=1)] = 0.97
    batch_size: Annotated[int, Field(ge=1)] = 64
    buffer_capacity: Annotated[int, Field(ge=1)] = 2000
    actor_lr: Annotated[float, Field(gt=0)] = 1e-4
    critic_lr: Annotated[float, Field(gt=0)] = 1e-3
    updates_per_episode: Annotated[int, Field(ge=1)] = 10

    @property
    def initial_sigma(self) -> float:
        return self.sigma0 if self.sigma0 is not None else 0.25 * self.a_max


class EnvConfig(FrozenBaseModel):
    flops_target: Annotated[float, Field(gt=0, lt=1)] = 0.5
    max_steps: Annotated[int, Field(ge=1)] = 5
    warmup_episodes: Annotated[int, Field(ge=0)] = 30
    exploit_episodes: Annotated[int, Field(ge=0)] = 150
    fine_tune_epochs_per_reward: Annotated[int, Field(ge=0)] = 0
    failure_reward: Annotated[float, Field(ge=-1, le=0)] = -1.0
    seed: int = 0

    @property
    def total_episodes(self) -> int:
        return self.warmup_episodes + self.exploit_episodes


class DatasetConfig(FrozenBaseModel):
    validation_fraction: Annotated[float, Field(gt=0, lt=1)] = 0.1
    test_fraction: Annotated[float, Field(gt=0, lt=1)] = 0.2
    seed: int = 0

    @model_validator(mode="after")
    def _check_fractions(self):
        if self.validation_fraction + self.test_fraction >= 1:
            raise ValueError("validation and test fractions must leave room for a training split")

        return self


class Settings(BaseSettings):
    model: Path | None = None
    weights: Path | None = None
    dataset: str | None = None
    out: Path = Path("out")
    seed: int = 0
    env: Annotated[EnvConfig, Field(default_factory=EnvConfig)]
    agent: Annotated[AgentConfig, Field(default_factory=AgentConfig)]
    encoder: Annotated[EncoderConfig, Field(default_factory=EncoderConfig)]
    data: Annotated[DatasetConfig, Field(default_factory=DatasetConfig)]
    baseline: Annotated[TrainConfig, Field(default_factory=TrainConfig)]
    finetune: Annotated[FinetuneConfig, Field(default_factory=FinetuneConfig)]
    reward_finetune: Annotated[RewardFinetuneConfig, Field(default_factory=RewardFinetuneConfig)]

    model_config = SettingsConfigDict(
        frozen=True,
        env_file=".env",
        env_nested_delimiter="__",
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # flags > environment > config file > defaults
        sources = [init_settings, env_settings, dotenv_settings]
        json_file = settings_cls.model_config.get("json_file")

        if json_file is not None:
            sources.append(JsonConfigSettingsSource(settings_cls, json_file=json_file))

        return tuple(sources)


def load_settings(config_file: Path | None = None, **overrides) -> Settings:
    """Build settings from an optional JSON config file, the environment and explicit overrides.
    Overrides with a value of None are ignored so that unset CLI flags fall through to lower layers."""
    overrides = _drop_unset(overrides)

    if config_file is None:
        return Settings(**overrides)

    if not config_file.is_file():
        raise FileNotFoundError(f"config file {config_file} does not exist")

    class _FileSettings(Settings):
        model_config = SettingsConfigDict(json_file=config_file)

    return _FileSettings(**overrides)


def _drop_unset(values: dict) -> dict:
    cleaned = {}

    for key, value in values.items():
        if isinstance(value, dict):
            value = _drop_unset(value)

            if len(value) == 0:
                continue

        if value is not None:
            cleaned[key] = value

    return cleaned
