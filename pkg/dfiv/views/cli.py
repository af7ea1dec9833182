"""
Command-line surface: run, tune, ablate and gen.

Spec files hold flat ``key=value`` lines; any key can be overridden with
``--set key=value`` and the common keys have their own flags.
"""
import argparse
import sys
from typing import Dict, List

from loguru import logger

from dfiv.config.settings import settings
from dfiv.controllers.experiment_controller import ExperimentController
from dfiv.exceptions import InvalidSpecError
from dfiv.schemas.experiment import RunReport, RunSpec, Task
from dfiv.storage.spec_files import read_spec_file

_FLAG_KEYS = ("task", "estimator", "seed", "repeats", "output", "threads", "n", "rho")


def _add_spec_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("spec_file", type=str, help="flat key=value run spec")
    parser.add_argument("--task", type=str)
    parser.add_argument("--estimator", type=str)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--output", type=str)
    parser.add_argument("--threads", type=int, help="repeats run concurrently on this many threads")
    parser.add_argument("--n", type=int, help="total sample size")
    parser.add_argument("--rho", type=str, help="comma-separated confounding strengths")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description=settings.APP_DESCRIPTION)
    parser.add_argument("--log-level", type=str, default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "run a seeded experiment and write its results"),
        ("tune", "select lambda1/lambda2 by out-of-sample stage losses, then run"),
        ("ablate", "compare alternating DFIV with joint training"),
    ):
        _add_spec_arguments(commands.add_parser(name, help=help_text))

    gen = commands.add_parser("gen", help="write a generated dataset")
    gen.add_argument("task", type=str, choices=[task.value for task in Task if task is not Task.ABLATION_JOINT])
    gen.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    gen.add_argument("--n", type=int, default=None)
    gen.add_argument("--rho", type=float, default=0.5)
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _parse_overrides(pairs: List[str]) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise InvalidSpecError(f"--set expects KEY=VALUE, got {pair!r}")
        entries[key.strip()] = value.strip()
    return entries


def load_spec(args: argparse.Namespace) -> RunSpec:
    """Spec file entries, then ``--set`` overrides, then dedicated flags."""
    entries: Dict[str, object] = dict(read_spec_file(args.spec_file))
    entries.update(_parse_overrides(args.overrides))
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            entries[key] = value
    return RunSpec.model_validate(entries)


def _finish(report: RunReport, spec: RunSpec) -> int:
    if not spec.output:
        sys.stdout.write(report.model_dump_json(indent=2) + "\n")
    if report.has_total_failure:
        logger.error("❌ every repeat of at least one setting failed")
        return 1
    return 0


def run_command(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    return _finish(ExperimentController.run_experiment(spec), spec)


def tune_command(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    return _finish(ExperimentController.tune_report(spec), spec)


def ablate_command(args: argparse.Namespace) -> int:
    spec = load_spec(args)
    return _finish(ExperimentController.ablate(spec), spec)


def gen_command(args: argparse.Namespace) -> int:
    written = ExperimentController.generate(
        Task(args.task), args.seed, args.n, args.out, args.rho, overrides=_parse_overrides(args.overrides)
    )
    for kind, path in written.items():
        sys.stdout.write(f"{kind}\t{path}\n")
    return 0


COMMANDS = {
    "run": run_command,
    "tune": tune_command,
    "ablate": ablate_command,
    "gen": gen_command,
}
