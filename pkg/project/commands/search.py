import csv
import logging
from pathlib import Path

from pydantic import BaseModel

from project.agent import DDPGAgent
from project.config import Settings
from project.dependencies import get_agent, get_dataset, get_model, get_oracle
from project.environment import EpisodeReport, SearchResult, train
from project.errors import SearchFailedError
from project.model_ir import save_model
from project.pruning import ratios_csv, ratios_json

logger = logging.getLogger(__name__)

PRUNED_MODEL = "pruned_model.json"
PRUNED_WEIGHTS = "pruned_weights.bin"
POLICY_JSON = "policy.json"
POLICY_CSV = "policy.csv"
HISTORY_CSV = "history.csv"
EPISODES_JSONL = "episodes.jsonl"
AGENT_CHECKPOINT = "agent.bin"

HISTORY_COLUMNS = ("episode", "mode", "steps", "flops_ratio", "final_accuracy", "reward", "terminated_by")


class SearchSummary(BaseModel):
    episodes: int
    constraint_met: int
    best_episode: int
    best_reward: float
    best_accuracy: float
    best_flops_ratio: float
    artifacts: list[str]


def write_history(path: Path, history: list[EpisodeReport]):
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)

        for report in history:
            writer.writerow(
                [
                    report.episode,
                    report.mode.value,
                    len(report.steps),
                    repr(report.flops_ratio),
                    "" if report.final_accuracy is None else repr(report.final_accuracy),
                    repr(report.reward),
                    report.terminated_by.value,
                ]
            )


def _write_artifacts(out: Path, result: SearchResult) -> list[Path]:
    model_path, weights_path = out / PRUNED_MODEL, out / PRUNED_WEIGHTS
    m = result.best_model
    save_model(m, model_path, weights_path if m.has_weights else None)

    (out / POLICY_JSON).write_text(ratios_json(result.best_ratios))
    (out / POLICY_CSV).write_text(ratios_csv(result.best_ratios))

    written = [model_path, out / POLICY_JSON, out / POLICY_CSV]
    return written + ([weights_path] if m.has_weights else [])


def cmd_search(settings: Settings, random_search: bool = False) -> SearchSummary:
    """Run the episode schedule on the baseline model and write the best constraint-satisfying model and policy.
    The JSONL episode stream is appended to; every other artifact is overwritten."""
    m0 = get_model(settings, require_weights=True)
    dataset = get_dataset(settings, m0)
    oracle = get_oracle(settings, dataset)
    agent = get_agent(settings, m0, random_search)

    out = settings.out
    out.mkdir(parents=True, exist_ok=True)

    with (out / EPISODES_JSONL).open("a") as stream:

        def on_episode(report: EpisodeReport):
            stream.write(report.model_dump_json() + "\n")
            stream.flush()

        result = train(m0, agent, oracle, settings.env, settings.agent.a_max, on_episode)

    write_history(out / HISTORY_CSV, result.history)
    artifacts = [out / HISTORY_CSV, out / EPISODES_JSONL]

    if isinstance(agent, DDPGAgent):
        agent.save_checkpoint(out / AGENT_CHECKPOINT)
        artifacts.append(out / AGENT_CHECKPOINT)

    if result.best_model is None:
        raise SearchFailedError(
            f"none of {len(result.history)} episodes reached a FLOPs ratio of {settings.env.flops_target}"
        )

    artifacts += _write_artifacts(out, result)
    best = result.best_report

    logger.info(
        f"Best episode {best.episode}: FLOPs ratio {best.flops_ratio:.4f}, accuracy {best.final_accuracy:.4f}.",
        extra={"episode": best.episode, "reward": best.reward, "flops_ratio": best.flops_ratio},
    )

    return SearchSummary(
        episodes=len(result.history),
        constraint_met=sum(1 for report in result.history if report.final_accuracy is not None),
        best_episode=best.episode,
        best_reward=best.reward,
        best_accuracy=best.final_accuracy,
        best_flops_ratio=best.flops_ratio,
        artifacts=sorted(str(path) for path in artifacts),
    )
