import argparse
import json
import logging.config
import sys
from pathlib import Path

from pydantic import BaseModel, ValidationError

from project.commands.analyze import cmd_analyze, format_table
from project.commands.baseline import cmd_train_baseline
from project.commands.finetune import cmd_finetune
from project.commands.search import cmd_search
from project.config import Settings, load_settings
from project.errors import PruneSearchError

logger = logging.getLogger(__name__)


class Author(BaseModel):
    name: str
    email: str | None = None


class Project(BaseModel):
    name: str
    version: str
    description: str
    authors: list[Author]
    license: str


class PyProject(BaseModel):
    project: Project


def get_project_root():
    return Path(__file__).parent.parent


def load_pyproject():
    import tomli

    with open(get_project_root() / "pyproject.toml", mode="rb") as f:
        pyproject_data = tomli.load(f)
        return PyProject(**pyproject_data)


def configure_logging():
    log_dir = get_project_root() / "logs"
    log_dir.mkdir(exist_ok=True)

    with open(get_project_root() / "config" / "logging.json") as f:
        log_config = json.load(f)

    # relative file names resolve against the project root, not the working directory
    for handler in log_config["handlers"].values():
        if "filename" in handler:
            handler["filename"] = str(get_project_root() / handler["filename"])

    logging.config.dictConfig(log_config)


def _common_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, help="JSON config file, overridden by environment and flags")
    parser.add_argument("--model", type=Path, help="IR document of the network")
    parser.add_argument("--weights", type=Path, help="weights sidecar file of the network")
    parser.add_argument("--dataset", help="built-in dataset name, IDX directory or CSV file")
    parser.add_argument("--out", type=Path, help="output directory for artifacts")
    parser.add_argument("--seed", type=int)
    return parser


def build_parser() -> argparse.ArgumentParser:
    project = load_pyproject().project
    common = _common_flags()

    parser = argparse.ArgumentParser(prog=project.name, description=project.description)
    parser.add_argument("--version", action="version", version=f"%(prog)s {project.version}")
    commands = parser.add_subparsers(dest="command", required=True)

    analyze = commands.add_parser("analyze", parents=[common], help="report FLOPs, parameters and agent slots")
    analyze.add_argument("--table", action="store_true", help="print a human-readable table instead of JSON")

    commands.add_parser("train-baseline", parents=[common], help="train the unpruned network")

    search = commands.add_parser("search", parents=[common], help="search a pruning policy under a FLOPs budget")
    search.add_argument("--flops-target", type=float, help="preserved FLOPs ratio to reach")
    search.add_argument("--episodes-warmup", type=int)
    search.add_argument("--episodes-exploit", type=int)
    search.add_argument("--max-steps", type=int, help="pruning steps per episode")
    search.add_argument("--fine-tune-epochs", type=int, help="fine-tune epochs before each reward evaluation")
    search.add_argument("--random-search", action="store_true", help="act uniformly at random, never learn")

    finetune = commands.add_parser("finetune", parents=[common], help="retrain the layers of a pruned network")
    finetune.add_argument("--fine-tune-epochs", type=int)

    return parser


def settings_from_args(args: argparse.Namespace) -> Settings:
    seed = args.seed
    fine_tune_epochs = getattr(args, "fine_tune_epochs", None)
    search = args.command == "search"

    return load_settings(
        args.config,
        model=args.model,
        weights=args.weights,
        dataset=args.dataset,
        out=args.out,
        seed=seed,
        env={
            "flops_target": getattr(args, "flops_target", None),
            "warmup_episodes": getattr(args, "episodes_warmup", None),
            "exploit_episodes": getattr(args, "episodes_exploit", None),
            "max_steps": getattr(args, "max_steps", None),
            "fine_tune_epochs_per_reward": fine_tune_epochs if search else None,
            "seed": seed,
        },
        data={"seed": seed},
        baseline={"seed": seed},
        finetune={"seed": seed, "epochs": None if search else fine_tune_epochs},
    )


def _print_error(e: Exception):
    print(json.dumps({"error": type(e).__name__, "detail": str(e)}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        settings = settings_from_args(args)

        if args.command == "analyze":
            report = cmd_analyze(settings)
            print(format_table(report) if args.table else report.model_dump_json(indent=2))
        elif args.command == "train-baseline":
            print(cmd_train_baseline(settings).model_dump_json(indent=2))
        elif args.command == "search":
            print(cmd_search(settings, random_search=args.random_search).model_dump_json(indent=2))
        elif args.command == "finetune":
            print(cmd_finetune(settings).model_dump_json(indent=2))
    except PruneSearchError as e:
        logger.exception(f"Command {args.command} failed.")
        _print_error(e)
        return e.exit_code
    except (ValidationError, FileNotFoundError) as e:
        logger.exception(f"Command {args.command} was called with an invalid configuration.")
        _print_error(e)
        return 2

    return 0


def run():  # pragma: no cover
    configure_logging()
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    run()
