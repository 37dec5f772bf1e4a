"""
Experiment configuration and rc-file handling for consjl.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from . import logger
from .configs import (
    CONFIG_NAMES,
    PRESETS,
    generate_config,
    load_initial_state,
    preset_params,
)
from .control import DRMode, MeanSource, StrategyKind
from .jl import JLFamily
from .model import FlockState, ModelParams
from .seeding import check_seed

CONFIG_DIR = ".consjl"
CONFIG_FILE = ".consjlrc"

SUBCOMMANDS = ("simulate", "sweep-k", "exactness", "bounds", "gen-config")

# serialized fields in file order, with their value kind
_FIELDS: tuple[tuple[str, str], ...] = (
    ("config_name", "str"),
    ("initial", "optstr"),
    ("N", "optint"),
    ("d", "optint"),
    ("K", "optfloat"),
    ("sigma", "optfloat"),
    ("beta", "optfloat"),
    ("theta", "optfloat"),
    ("tau", "optfloat"),
    ("horizon", "optfloat"),
    ("strategies", "strs"),
    ("k_values", "ints"),
    ("seeds", "ints"),
    ("dr_mode", "str"),
    ("family", "str"),
    ("mean_source", "str"),
    ("substeps", "int"),
    ("n_matrices", "int"),
    ("config_seed", "int"),
    ("eps", "float"),
    ("delta", "float"),
    ("out", "str"),
)
FIELD_NAMES = tuple(name for name, _ in _FIELDS)

# command-line spelling of each serialized field
CLI_FLAGS: dict[str, str] = {
    name: "--" + name.replace("_", "-") for name in FIELD_NAMES
} | {
    "config_name": "--preset",
    "strategies": "--strategy",
    "k_values": "--k",
    "seeds": "--seed",
    "dr_mode": "--mode",
}


def _safe_input(prompt: str, default: str = "n") -> str:
    """Ask for an answer; an empty reply or closed stdin gives ``default``."""
    try:
        answer = input(prompt)
    except EOFError:
        return default
    return answer.strip() or default


def _format_value(kind: str, value: Any) -> str:
    if value is None:
        return "none"
    if kind in ("float", "optfloat"):
        return repr(float(value))
    if kind in ("strs", "ints"):
        return ", ".join(str(item) for item in value)
    return str(value)


def _parse_value(kind: str, text: str, key: str, lineno: int) -> Any:
    if kind.startswith("opt") and text.lower() == "none":
        return None
    try:
        if kind in ("int", "optint"):
            return int(text)
        if kind in ("float", "optfloat"):
            return float(text)
        if kind == "ints":
            return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ValueError(
            f"line {lineno}: cannot parse {key} = {text!r} as {kind.replace('opt', '')}"
        ) from None
    if kind == "strs":
        return [item.strip() for item in text.split(",") if item.strip()]
    if not text:
        raise ValueError(f"line {lineno}: {key} needs a value")
    return text


class ExperimentConfig:
    """Everything one harness command needs to reproduce its output."""

    def __init__(
        self,
        *,
        # Initial datum
        config_name: str = "outlier",
        initial: str | None = None,
        config_seed: int = 0,
        # Model parameter overrides, None keeps the preset value
        N: int | None = None,
        d: int | None = None,
        K: float | None = None,
        sigma: float | None = None,
        beta: float | None = None,
        theta: float | None = None,
        tau: float | None = None,
        horizon: float | None = None,
        # Runs
        strategies: list[str] | None = None,
        k_values: list[int] | None = None,
        seeds: list[int] | None = None,
        dr_mode: str = "experimental",
        family: str = "bernoulli",
        mean_source: str = "observed",
        substeps: int = 1,
        n_matrices: int = 6,
        # JL parameters of the bounds command
        eps: float = 0.5,
        delta: float = 1.0,
        # Output
        out: str = "results",
        # Interface options
        verbose: bool = True,
        disable_traceback: bool = False,
        create_config: bool = False,
    ) -> None:
        """Initialize ExperimentConfig with keyword-only arguments.

        Args:
            config_name: Named initial configuration, or ``file`` to read the
                initial state from ``initial``. Default: "outlier".
            initial: Path of an initial-state file. Default: None.
            config_seed: Seed of the random configurations (cauchy,
                gaussian). Default: 0.
            N, d, K, sigma, beta, theta, tau: Overrides of the preset's model
                parameters. Default: None.
            horizon: Final time; defaults to the preset's horizon.
            strategies: Strategy names among none, sp, u, r, dr.
                Default: ["sp"].
            k_values: Projected dimensions of the dr strategy. Default: [].
            seeds: Run seeds, every seed appears in the outputs. Default: [0].
            dr_mode: Threshold of the projected strategy, "theoretical" or
                "experimental". Default: "experimental".
            family: Projection family. Default: "bernoulli".
            mean_source: Mean used by the projected strategy on the high
                system, "observed" or "reconstructed". Default: "observed".
            substeps: RK4 steps per sampling interval. Default: 1.
            n_matrices: Matrices drawn by the exactness study. Default: 6.
            eps: JL distortion used by the bounds command. Default: 0.5.
            delta: JL threshold used by the bounds command. Default: 1.0.
            out: Output directory. Default: "results".
            verbose: Show progress bars and panels. Default: True.
            disable_traceback: Plain error output instead of the rich
                traceback. Default: False.
            create_config: Write an example rc file and exit. Default: False.
        """
        if config_name not in CONFIG_NAMES:
            raise ValueError(
                f"config_name must be one of {', '.join(CONFIG_NAMES)}, "
                f"got {config_name!r}"
            )
        if config_name == "file":
            if not initial:
                raise ValueError("config_name 'file' needs an initial-state path")
            if horizon is None:
                raise ValueError("config_name 'file' needs an explicit horizon")
        self.config_name = config_name
        self.initial = initial
        self.config_seed = check_seed(config_seed)

        self.N = N
        self.d = d
        self.K = K
        self.sigma = sigma
        self.beta = beta
        self.theta = theta
        self.tau = tau
        if horizon is not None and not horizon > 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        self.horizon = horizon

        strategies = ["sp"] if strategies is None else [s.lower() for s in strategies]
        if not strategies:
            raise ValueError("at least one strategy is required")
        for name in strategies:
            StrategyKind(name)
        self.strategies = strategies
        self.k_values = list(k_values or [])
        if any(k < 1 for k in self.k_values):
            raise ValueError(f"k values must be positive, got {self.k_values}")
        if "dr" in strategies and not self.k_values:
            raise ValueError("the dr strategy needs at least one k value")
        seeds = [0] if seeds is None else list(seeds)
        if not seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [check_seed(seed) for seed in seeds]
        self.dr_mode = DRMode(dr_mode).value
        self.family = JLFamily(family).value
        self.mean_source = MeanSource(mean_source).value
        if substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {substeps}")
        self.substeps = substeps
        if n_matrices < 1:
            raise ValueError(f"n_matrices must be a positive integer, got {n_matrices}")
        self.n_matrices = n_matrices
        if not 0 < eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        self.eps = eps
        self.delta = delta
        self.out = out

        self.verbose = verbose
        self.disable_traceback = disable_traceback
        self.create_config = create_config

    def as_dict(self) -> dict[str, Any]:
        """Serialized fields, lists copied."""
        data = {}
        for name in FIELD_NAMES:
            value = getattr(self, name)
            data[name] = list(value) if isinstance(value, list) else value
        return data

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self) -> str:
        fields = ", ".join(f"{key}={value!r}" for key, value in self.as_dict().items())
        return f"ExperimentConfig({fields})"

    @classmethod
    def from_namespace(
        cls, args_namespace, base: ExperimentConfig | None = None
    ) -> ExperimentConfig:
        """Create ExperimentConfig from argparse.Namespace.

        Attributes that are missing or None keep the value of ``base`` (a
        config file given with ``--config``) or the default.
        """
        values = (base or cls()).as_dict()
        for name in FIELD_NAMES:
            value = getattr(args_namespace, name, None)
            if value is not None:
                values[name] = value
        return cls(
            **values,
            verbose=getattr(args_namespace, "verbose", True),
            disable_traceback=getattr(args_namespace, "disable_traceback", False),
            create_config=getattr(args_namespace, "create_config", False),
        )

    def to_cli_args(self) -> list[str]:
        """Subcommand arguments reproducing the serialized fields that differ
        from the defaults."""
        res = []
        defaults = type(self)().as_dict()
        kinds = dict(_FIELDS)
        for name, value in self.as_dict().items():
            if value == defaults[name] or value is None:
                continue
            if kinds[name] in ("strs", "ints"):
                if not value:
                    continue
                res += [CLI_FLAGS[name], ",".join(str(item) for item in value)]
            else:
                res += [CLI_FLAGS[name], _format_value(kinds[name], value)]
        if not self.verbose:
            res.append("--no-verbose")
        return res

    def dumps(self) -> str:
        lines = ["# consjl experiment configuration"]
        for name, kind in _FIELDS:
            lines.append(f"{name} = {_format_value(kind, getattr(self, name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        """Parse the flat ``key = value`` format; ``#`` starts a comment."""
        kinds = dict(_FIELDS)
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if key not in kinds:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(kinds[key], value.strip(), key, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise OSError(f"cannot read configuration {path}: {e}") from e
        try:
            return cls.loads(text)
        except ValueError as e:
            raise ValueError(f"{path}: {e}") from e

    def save(self, path: str | Path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as f:
                f.write(self.dumps())
        except OSError as e:
            raise OSError(f"cannot write configuration {path}: {e}") from e

    def model_params(self) -> ModelParams:
        """Preset parameters with the explicit fields applied."""
        overrides = {
            "N": self.N,
            "d": self.d,
            "K": self.K,
            "sigma": self.sigma,
            "beta": self.beta,
            "theta": self.theta,
            "tau": self.tau,
        }
        if self.config_name != "file":
            return preset_params(self.config_name, **overrides)
        state = load_initial_state(self.initial)  # type: ignore[arg-type]
        for name, actual in (("N", state.n_agents), ("d", state.dim)):
            if overrides[name] is not None and overrides[name] != actual:
                raise ValueError(
                    f"{name}={overrides[name]} does not match {self.initial} ({actual})"
                )
        base = ModelParams(N=state.n_agents, d=state.dim)
        return dataclasses.replace(
            base, **{key: value for key, value in overrides.items() if value is not None}
        )

    def resolved_horizon(self) -> float:
        if self.horizon is not None:
            return float(self.horizon)
        return float(PRESETS[self.config_name]["horizon"])

    def initial_state(self, params: ModelParams | None = None) -> FlockState:
        params = params or self.model_params()
        if self.config_name == "file":
            state = load_initial_state(self.initial)  # type: ignore[arg-type]
            if (state.n_agents, state.dim) != (params.N, params.d):
                raise ValueError(
                    f"{self.initial} holds {state.n_agents} agents in dimension "
                    f"{state.dim}, expected {params.N} in dimension {params.d}"
                )
            return state
        return generate_config(self.config_name, params, self.config_seed)


class ConsjlConfig:
    """Manager of the ~/.consjl/.consjlrc file."""

    def __init__(self) -> None:
        self.config_path = self._get_config_path()

    def _get_config_path(self) -> Path:
        return Path.home() / CONFIG_DIR / CONFIG_FILE

    def load_config(self) -> dict[str, Any]:
        """
        Load configuration from ~/.consjl/.consjlrc.

        Returns:
            dict[str, Any]: Configuration dictionary. Empty dict if file doesn't exist.
        """
        if not self.config_path.exists():
            return {}

        try:
            with open(self.config_path, encoding="utf-8") as f:
                config = json.load(f)
        except json.JSONDecodeError as e:
            logger.safe_print(
                f"[red]Error: Invalid JSON in configuration file "
                f"{self.config_path}: {e}[/red]"
            )
            return {}
        except OSError as e:  # pragma: no cover
            logger.safe_print(
                f"[red]Error loading configuration file {self.config_path}: {e}[/red]"
            )
            return {}
        if not isinstance(config, dict):
            logger.safe_print(
                f"[yellow]Warning: Configuration file {self.config_path} "
                "is not a valid JSON object. Ignoring.[/yellow]"
            )
            return {}
        return config

    def merge_with_args(self, config: dict[str, Any], cmd_args: list[str]) -> list[str]:
        """
        Merge configuration with command line arguments.

        The rc arguments go right after the subcommand so that the subcommand
        parser sees them first and the command line takes precedence.

        Args:
            config (dict[str, Any]): Configuration dictionary from file
            cmd_args (list[str]): Command line arguments

        Returns:
            list[str]: Merged arguments
        """
        if not config:
            return cmd_args

        config_args = config.get("args", [])
        if not isinstance(config_args, list):
            logger.safe_print(
                f"[yellow]Warning: 'args' in configuration file should be a list, "
                f"got {type(config_args).__name__}. Ignoring config args.[/yellow]"
            )
            return cmd_args
        config_args = [str(arg) for arg in config_args]

        for idx, token in enumerate(cmd_args):
            if token in SUBCOMMANDS:
                return cmd_args[: idx + 1] + config_args + cmd_args[idx + 1 :]
        return config_args + cmd_args

    def create_example_config(self) -> None:
        """Create an example configuration file."""
        if self.config_path.exists():
            logger.safe_print(
                f"[yellow]Configuration file already exists at "
                f"{self.config_path}[/yellow]"
            )
            response = (
                _safe_input("Do you want to overwrite it? (y/N): ", "n").strip().lower()
            )
            if response not in ("y", "yes"):
                logger.safe_print("[blue]Configuration file creation cancelled.[/blue]")
                return

        self.config_path.parent.mkdir(exist_ok=True)
        example_config = {
            "args": [
                # Output
                "--out",
                "results",
                # Reproducibility
                "--seed",
                "0,1,2,3,4",
                # Projected strategy
                "--family",
                "bernoulli",
                "--mode",
                "experimental",
            ]
        }
        with open(self.config_path, "w", encoding="utf-8") as f:
            json.dump(example_config, f, indent=2)

        logger.safe_print(
            f"[green]Created example configuration file at {self.config_path}[/green]"
        )


def load_config_if_exists() -> dict[str, Any]:
    return ConsjlConfig().load_config()


def merge_config_with_args(cmd_args: list[str]) -> list[str]:
    """
    Convenience function to merge the rc file with command line arguments.

    Args:
        cmd_args (list[str]): Command line arguments

    Returns:
        list[str]: Merged arguments
    """
    config_manager = ConsjlConfig()
    return config_manager.merge_with_args(config_manager.load_config(), cmd_args)
