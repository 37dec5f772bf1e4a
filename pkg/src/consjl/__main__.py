"""
consjl command entry point.
"""

from __future__ import annotations

import argparse
import heapq
import sys
from abc import ABC, abstractmethod

try:
    from typing import override
except ImportError:
    try:
        from typing_extensions import override  # noqa: UP035
    except ImportError:

        def override(func):
            return func


from rich.panel import Panel
from rich.table import Table
from rich.traceback import Traceback, install
from rich_argparse import RichHelpFormatter

from . import experiments, logger
from ._version import __version__
from .config import ConsjlConfig, ExperimentConfig, merge_config_with_args
from .configs import CONFIG_NAMES, PRESETS
from .control import DRMode, MeanSource, StrategyKind
from .jl import JLFamily

console = logger.console
err_console = logger.err_console


def add_boolean_argument(
    parser: argparse.ArgumentParser,
    *flags: str,
    default: bool | None = None,
    help: str = "",
    **kwargs,
) -> None:
    """Add a boolean argument with --flag/--no-flag support."""
    parser.add_argument(
        *flags,
        action=argparse.BooleanOptionalAction,
        default=default,
        help=help,
        **kwargs,
    )


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {number}")
    return number


def _int_list(value: str) -> list[int]:
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma separated integers, got {value!r}"
        ) from None


def _name_list(value: str) -> list[str]:
    names = [item.strip().lower() for item in value.split(",") if item.strip()]
    allowed = [kind.value for kind in StrategyKind]
    for name in names:
        if name not in allowed:
            raise argparse.ArgumentTypeError(
                f"unknown strategy {name!r}, expected one of {', '.join(allowed)}"
            )
    return names


class ArgsHandler(ABC):
    def __init__(self, name: str, priority: int = 0) -> None:
        """
        Initialize a new instance with the given name and optional priority.

        Args:
            name (str): The name of the instance.
            priority (int, optional): The priority level. Defaults to 0.
        """
        self.name = name
        self.priority = priority

    @property
    def weight(self) -> int:
        return self.priority

    def __str__(self):  # pragma: no cover
        return f"[bold blue] Handler[name = {self.name}, priority={self.priority}][/bold blue]"  # noqa: E501

    @abstractmethod
    def handle(self, args: argparse.Namespace) -> bool:
        """
        Handle the command.
        Args:
            args (argparse.Namespace): The arguments passed to the command.
        Returns:
            bool: Whether the command be handled.
        """
        pass  # pragma: no cover

    @classmethod
    def build(cls) -> ArgsHandler:
        return cls()

    def __lt__(self, other: ArgsHandler) -> bool:
        return self.weight > other.weight  # big heap


handlers: list[ArgsHandler] = []


def register_handler(handler: type[ArgsHandler]) -> type[ArgsHandler]:
    heapq.heappush(handlers, handler.build())
    return handler


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Config file given with --config, overridden by explicit flags."""
    base = None
    if getattr(args, "config_file", None):
        base = ExperimentConfig.load(args.config_file)
    return ExperimentConfig.from_namespace(args, base)


class CommandHandler(ArgsHandler):
    command: str = ""

    def __init__(self, priority: int = 0) -> None:
        super().__init__(f"{self.command} command", priority=priority)

    @override
    def handle(self, args: argparse.Namespace) -> bool:
        if args.command != self.command:
            return False
        self.run(load_experiment(args), args)
        return True

    @abstractmethod
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        pass  # pragma: no cover


@register_handler
class SimulateHandler(CommandHandler):
    command = "simulate"

    def __init__(self, priority: int = 1024) -> None:
        super().__init__(priority)

    @override
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        experiments.cmd_simulate(config)


@register_handler
class SweepHandler(CommandHandler):
    command = "sweep-k"

    def __init__(self, priority: int = 512) -> None:
        super().__init__(priority)

    @override
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        experiments.cmd_sweep_k(config)


@register_handler
class ExactnessHandler(CommandHandler):
    command = "exactness"

    def __init__(self, priority: int = 256) -> None:
        super().__init__(priority)

    @override
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        experiments.cmd_exactness(config)


@register_handler
class BoundsHandler(CommandHandler):
    command = "bounds"

    def __init__(self, priority: int = 128) -> None:
        super().__init__(priority)

    @override
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        experiments.cmd_bounds(config)


@register_handler
class GenConfigHandler(CommandHandler):
    command = "gen-config"

    def __init__(self, priority: int = 64) -> None:
        super().__init__(priority)

    @override
    def run(self, config: ExperimentConfig, args: argparse.Namespace) -> None:
        experiments.cmd_gen_config(config, args.output)


@register_handler
class UsageHandler(ArgsHandler):
    def __init__(self, priority: int = -1) -> None:
        super().__init__(name="usage", priority=priority)

    @override
    def handle(self, args: argparse.Namespace) -> bool:
        if args.command is not None:
            return False
        consjl_help(build_parser())
        return True


def dispatch(args: argparse.Namespace) -> None:
    for handler in sorted(handlers):
        if handler.handle(args):
            return

    raise RuntimeError(
        f"not found a proper handler to handle the arguments {args}, please check your arguments."  # noqa: E501
    )


def consjl_help(parser: argparse.ArgumentParser) -> None:
    parser.print_help()
    table = Table(title="Named Configurations", show_lines=True)

    table.add_column("Name", style="cyan", justify="right")
    for column in ("N", "d", "beta", "theta", "tau", "horizon"):
        table.add_column(column, style="magenta", justify="right")
    for name, preset in PRESETS.items():
        table.add_row(
            name,
            *(str(preset[key]) for key in ("N", "d", "beta", "theta", "tau", "horizon")),
        )
    print()  # print a new line
    console.print(table)


def _experiment_options() -> argparse.ArgumentParser:
    """Options shared by every subcommand; unset options keep the config file value."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        dest="config_file",
        type=str,
        help="Experiment configuration file in the flat `key = value` format.",
    )
    common.add_argument(
        "--preset",
        dest="config_name",
        choices=CONFIG_NAMES,
        help="Named initial configuration, or `file` together with --initial "
        "(default: outlier).",
    )
    common.add_argument("--initial", type=str, help="Initial-state file to start from.")
    common.add_argument(
        "--config-seed",
        type=int,
        help="Seed of the random configurations cauchy and gaussian (default: 0).",
    )
    common.add_argument("--N", type=_positive_int, help="Number of agents.")
    common.add_argument("--d", type=_positive_int, help="Ambient dimension.")
    for name, text in (
        ("--K", "Kernel scale."),
        ("--sigma", "Kernel offset."),
        ("--beta", "Kernel decay power."),
        ("--theta", "Control budget."),
        ("--tau", "Sampling time."),
    ):
        common.add_argument(name, type=float, help=f"{text} Overrides the preset value.")
    common.add_argument(
        "--horizon",
        type=float,
        help="Final time, rounded up to a multiple of tau (default: the preset's).",
    )
    common.add_argument(
        "--strategy",
        dest="strategies",
        type=_name_list,
        help="Comma separated strategies among none, sp, u, r, dr (default: sp).",
    )
    common.add_argument(
        "--k",
        dest="k_values",
        type=_int_list,
        help="Comma separated projected dimensions of the dr strategy.",
    )
    common.add_argument(
        "--seed",
        dest="seeds",
        type=_int_list,
        help="Comma separated run seeds (default: 0).",
    )
    common.add_argument(
        "--mode",
        dest="dr_mode",
        choices=[mode.value for mode in DRMode],
        help="Threshold that hands the dr strategy over to random control "
        "(default: experimental).",
    )
    common.add_argument(
        "--family",
        choices=[family.value for family in JLFamily],
        help="Projection matrix family (default: bernoulli).",
    )
    common.add_argument(
        "--mean-source",
        choices=[source.value for source in MeanSource],
        help="Mean velocity used to steer the high-dimensional agent "
        "(default: observed).",
    )
    common.add_argument(
        "--substeps", type=_positive_int, help="RK4 steps per sampling interval."
    )
    common.add_argument(
        "--n-matrices",
        type=_positive_int,
        help="Matrices drawn by the exactness study (default: 6).",
    )
    common.add_argument(
        "--eps", type=float, help="JL distortion for bounds (default: 0.5)."
    )
    common.add_argument(
        "--delta", type=float, help="JL threshold for bounds (default: 1.0)."
    )
    common.add_argument("--out", type=str, help="Output directory (default: results).")
    add_boolean_argument(
        common,
        "--verbose",
        default=True,
        help="Show progress bars, tables and panels (default: True).",
    )
    common.add_argument(
        "--disable-traceback",
        action="store_true",
        help="Print a plain error message instead of the rich traceback.",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consjl",
        description="Sparse control of high-dimensional Cucker-Smale systems through "
        "Johnson-Lindenstrauss projections.",
        add_help=False,
        formatter_class=RichHelpFormatter,
    )
    parser.add_argument(
        "-h", "--help", action="store_true", help="Show this help message and exit."
    )
    parser.add_argument(
        "-v", "--version", action="store_true", help="Show version information and exit."
    )
    parser.add_argument(
        "--create-config",
        action="store_true",
        help="Create an example configuration file at ~/.consjl/.consjlrc and exit.",
    )
    common = _experiment_options()
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    for name, text in (
        ("simulate", "Run every (strategy, k, seed) cell, write CSVs and a summary."),
        ("sweep-k", "Mean switch-off time of dr per k, with sp and r baselines."),
        ("exactness", "Exactness at zero against switch-off time for drawn matrices."),
        ("bounds", "Print the theory constants and dimension estimates."),
        ("gen-config", "Write the initial state of a named configuration."),
    ):
        sub = subparsers.add_parser(
            name, parents=[common], help=text, formatter_class=RichHelpFormatter
        )
        if name == "gen-config":
            sub.add_argument(
                "-o",
                "--output",
                type=str,
                help="Initial-state file (default: <out>/<preset>_s<config-seed>.txt).",
            )
    return parser


def _pre_checks(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if args.help:
        consjl_help(parser)
        sys.exit(0)

    if args.version:
        print(f"consjl version {__version__}")
        sys.exit(0)

    if args.create_config:
        ConsjlConfig().create_example_config()
        sys.exit(0)


def main(argv: list[str] | None = None) -> None:
    arguments = sys.argv[1:] if argv is None else list(argv)

    # Merge configuration file with command line arguments
    arguments = merge_config_with_args(arguments)

    parser = build_parser()
    args = parser.parse_args(arguments)
    _pre_checks(args, parser)
    disable_traceback = getattr(args, "disable_traceback", False)
    if not disable_traceback:
        install()
    try:
        dispatch(args)
    except Exception as e:
        if not disable_traceback:
            console.print(
                Panel(
                    "[bold red]The following traceback may be useful for debugging.[/bold red]",  # noqa: E501
                    title="[bold yellow]⚠ Error Traceback[/bold yellow]",
                    style="red",
                    border_style="bright_red",
                )
            )
            tb = Traceback()
            err_console.print(tb)
            err_console.print(
                "[bold cyan]You can also try running with --disable-traceback for a simpler output.[/bold cyan]"  # noqa: E501
            )
        else:
            print(str(e), file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
