"""
Experiment harness behind the consjl subcommands.

Every command expands an ExperimentConfig into independent (strategy, k,
seed) cells, runs them on a thread pool and writes per-cell files, so the
output does not depend on scheduling. Summaries are merged in sorted cell
order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn
from rich.table import Table
from scipy.stats import spearmanr

from . import logger
from ._version import __version__
from .analysis import TheoryConstants, compute_constants
from .config import ExperimentConfig
from .configs import save_initial_state
from .control import RunRecord, Strategy, StrategyKind, run_strategy
from .jl import (
    ProjectionMatrix,
    dimension_estimate,
    exactness_at_zero,
    generate,
    uncontrolled_dimension_estimate,
)
from .model import FlockState, ModelParams, moments

THREADS_ENV = "CONSENSUS_JL_THREADS"

CSV_COLUMNS = ("t", "X", "V", "gamma_sq", "margin", "W", "Y", "control_index", "active")
SWEEP_COLUMNS = ("strategy", "k", "mean_T0", "min_T0", "max_T0", "n_seeds", "n_reached")
EXACTNESS_COLUMNS = ("matrix", "seed", "k", "E_M", "T0")

T = TypeVar("T")


def thread_count() -> int:
    """Worker threads for independent cells, from CONSENSUS_JL_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(
            f"{THREADS_ENV} must be a positive integer, got {raw!r}"
        ) from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {value}")
    return value


@dataclass(frozen=True)
class Cell:
    strategy: str
    seed: int
    k: int | None = None

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.strategy, -1 if self.k is None else self.k, self.seed)

    def filename(self, config_name: str) -> str:
        k = "" if self.k is None else f"_k{self.k}"
        return f"{config_name}_{self.strategy}{k}_s{self.seed}.csv"

    def __str__(self) -> str:
        k = "" if self.k is None else f" k={self.k}"
        return f"{self.strategy}{k} seed={self.seed}"


class Setup:
    """Resolved parameters, horizon and initial state of a config."""

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config
        self.params: ModelParams = config.model_params()
        self.horizon = config.resolved_horizon()
        self.initial: FlockState = config.initial_state(self.params)


def plan_cells(config: ExperimentConfig) -> list[Cell]:
    cells = []
    for strategy in config.strategies:
        if strategy == StrategyKind.DR.value:
            cells += [
                Cell(strategy, seed, k) for k in config.k_values for seed in config.seeds
            ]
        else:
            cells += [Cell(strategy, seed) for seed in config.seeds]
    return cells


def projection_for(family: str, k: int, d: int, seed: int) -> ProjectionMatrix:
    """Identity when k == d, a drawn matrix of ``family`` otherwise."""
    if k == d:
        return ProjectionMatrix.identity(d)
    return generate(family, k, d, seed)


def build_strategy(config: ExperimentConfig, cell: Cell, d: int) -> Strategy:
    if cell.strategy != StrategyKind.DR.value:
        return Strategy.of(cell.strategy)
    M = projection_for(config.family, cell.k, d, cell.seed)  # type: ignore[arg-type]
    return Strategy.dr(M, config.dr_mode, mean_source=config.mean_source)


def run_cell(setup: Setup, cell: Cell) -> RunRecord:
    strategy = build_strategy(setup.config, cell, setup.params.d)
    return run_strategy(
        setup.initial,
        strategy,
        setup.horizon,
        setup.params,
        cell.seed,
        substeps=setup.config.substeps,
    )


def run_cells(
    items: Sequence[Any],
    work: Callable[[Any], T],
    *,
    description: str,
    verbose: bool = True,
) -> list[T]:
    """Run ``work`` on every item in parallel; results come back in item order."""
    results: list[Any] = [None] * len(items)
    progress = Progress(
        TextColumn("[bold blue]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=logger.console,
        disable=not verbose or logger.is_suppressed(),
    )
    with progress, ThreadPoolExecutor(max_workers=thread_count()) as pool:
        task = progress.add_task(description, total=len(items))
        futures = {pool.submit(work, item): idx for idx, item in enumerate(items)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
            progress.advance(task)
    return results


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")  # type: ignore[arg-type]


def _stamp() -> str:
    stamp = datetime.now().isoformat(timespec="seconds")
    return f"# consjl {__version__} generated {stamp}"


def _json_default(value: object) -> object:
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def output_dir(config: ExperimentConfig) -> Path:
    path = Path(config.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {path}: {e}") from e
    return path


def write_table(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """CSV with one timestamp comment line, then the header and the rows."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(_stamp() + "\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row[column]) for column in columns])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def write_json(path: Path, data: dict[str, Any]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=_json_default)
            f.write("\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def _header(command: str, setup: Setup) -> dict[str, Any]:
    return {
        "consjl_version": __version__,
        "command": command,
        "config": setup.config.as_dict(),
        "params": dataclasses.asdict(setup.params),
        "horizon": setup.horizon,
        "seeds": list(setup.config.seeds),
    }


def theory_for(
    initial: FlockState, params: ModelParams, M: ProjectionMatrix | None = None
) -> TheoryConstants:
    """Constants of the initial datum; without a projection W0 = V0 and Y0 = X0."""
    high = moments(initial)
    low = high if M is None else moments(initial.project(M))
    return compute_constants(high.X, high.V, low.V, low.X, params)


def cmd_simulate(config: ExperimentConfig) -> Path:
    """Run every (strategy, k, seed) cell; write one CSV each and summary.json.

    Returns:
        Path of the JSON summary.
    """
    setup = Setup(config)
    out = output_dir(config)
    config.save(out / "experiment.cfg")
    cells = plan_cells(config)

    def work(cell: Cell) -> dict[str, Any]:
        record = run_cell(setup, cell)
        name = cell.filename(config.config_name)
        write_table(out / name, CSV_COLUMNS, record.rows())
        entry: dict[str, Any] = {"file": name, **record.summary()}
        M = record.strategy.projection
        if M is not None:
            entry["E_M"] = exactness_at_zero(M, setup.initial.v)
            entry["theory"] = theory_for(setup.initial, setup.params, M).as_dict()
        return entry

    entries = run_cells(
        cells, work, description=f"simulate {config.config_name}", verbose=config.verbose
    )
    order = sorted(range(len(cells)), key=lambda idx: cells[idx].key)
    summary = _header("simulate", setup)
    summary["theory"] = theory_for(setup.initial, setup.params).as_dict()
    summary["cells"] = [entries[idx] for idx in order]
    path = out / "summary.json"
    write_json(path, summary)

    if config.verbose:
        table = Table(title=f"Switch-off times ({config.config_name})")
        for column in ("strategy", "k", "seed", "T0", "T0.5", "TS", "final margin"):
            table.add_column(column, justify="right")
        for idx in order:
            cell, entry = cells[idx], entries[idx]
            table.add_row(
                cell.strategy,
                "" if cell.k is None else str(cell.k),
                str(cell.seed),
                _show(entry["T0"]),
                _show(entry["T0_5"]),
                _show(entry["TS"]),
                _show(entry["final_margin"]),
            )
        if not logger.is_suppressed():
            logger.console.print(table)
        logger.log_success_panel(f"Wrote {len(cells)} run(s) and `{path}`")
    return path


def _show(value: float | None) -> str:
    return "-" if value is None else f"{value:.6g}"


def _t0_row(strategy: str, k: int | None, records: Sequence[RunRecord]) -> dict[str, Any]:
    reached = [r.T0 for r in records if r.T0 is not None]
    return {
        "strategy": strategy,
        "k": k,
        "mean_T0": float(np.mean(reached)) if reached else None,
        "min_T0": min(reached) if reached else None,
        "max_T0": max(reached) if reached else None,
        "n_seeds": len(records),
        "n_reached": len(reached),
    }


def cmd_sweep_k(config: ExperimentConfig) -> Path:
    """Mean switch-off time of the projected strategy per k, with SP and R baselines.

    SP does not depend on the seed and runs once.
    """
    if not config.k_values:
        raise ValueError("sweep-k needs at least one k value")
    setup = Setup(config)
    out = output_dir(config)
    cells = [Cell(StrategyKind.SP.value, config.seeds[0])]
    cells += [Cell(StrategyKind.R.value, seed) for seed in config.seeds]
    cells += [
        Cell(StrategyKind.DR.value, seed, k)
        for k in config.k_values
        for seed in config.seeds
    ]
    records = run_cells(
        cells,
        lambda cell: run_cell(setup, cell),
        description=f"sweep-k {config.config_name}",
        verbose=config.verbose,
    )

    groups: dict[tuple[str, int | None], list[RunRecord]] = {}
    for cell, record in zip(cells, records):
        groups.setdefault((cell.strategy, cell.k), []).append(record)
    rows = [_t0_row(strategy, k, group) for (strategy, k), group in groups.items()]
    path = out / f"{config.config_name}_sweep_k.csv"
    write_table(path, SWEEP_COLUMNS, rows)
    if config.verbose:
        logger.log_success_panel(f"Wrote the k sweep to `{path}`")
    return path


def cmd_exactness(config: ExperimentConfig, k: int | None = None) -> tuple[Path, float]:
    """Exactness at zero against switch-off time for ``n_matrices`` drawn matrices.

    Matrix ``m`` is drawn with seed ``m``; each runs once per config seed. An
    identity row (k = d) is added as the exact reference and left out of the
    rank correlation.

    Returns:
        The CSV path and the Spearman rank correlation between E_M and T0
        (nan with fewer than two reached runs).
    """
    if k is None:
        if not config.k_values:
            raise ValueError("exactness needs a k value")
        k = config.k_values[0]
    setup = Setup(config)
    out = output_dir(config)
    d = setup.params.d
    matrices = [("identity", ProjectionMatrix.identity(d))]
    matrices += [
        (str(m), generate(config.family, k, d, m)) for m in range(config.n_matrices)
    ]
    items = [(label, M, seed) for label, M in matrices for seed in config.seeds]

    def work(item: tuple[str, ProjectionMatrix, int]) -> dict[str, Any]:
        label, M, seed = item
        strategy = Strategy.dr(M, config.dr_mode, mean_source=config.mean_source)
        record = run_strategy(
            setup.initial,
            strategy,
            setup.horizon,
            setup.params,
            seed,
            substeps=config.substeps,
        )
        return {
            "matrix": label,
            "seed": seed,
            "k": M.k,
            "E_M": exactness_at_zero(M, setup.initial.v),
            "T0": record.T0,
        }

    rows = run_cells(items, work, description=f"exactness k={k}", verbose=config.verbose)
    path = out / f"{config.config_name}_exactness_k{k}.csv"
    write_table(path, EXACTNESS_COLUMNS, rows)

    points = [
        (row["E_M"], row["T0"])
        for row in rows
        if row["matrix"] != "identity" and row["T0"] is not None
    ]
    rho = math.nan
    if len(points) >= 2:
        E, T0 = zip(*points)
        rho = float(spearmanr(E, T0).correlation)
    if config.verbose:
        logger.log_success_panel(
            f"Wrote `{path}`; Spearman rank correlation of E_M and T0: {rho:.4g}"
        )
    return path, rho


def _value_table(title: str, data: dict[str, Any]) -> Table:
    table = Table(title=title, show_lines=False)
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="magenta", justify="right")
    for key, value in data.items():
        if isinstance(value, float):
            table.add_row(key, f"{value:.6g}")
        elif isinstance(value, list):
            table.add_row(key, "; ".join(str(item) for item in value) or "-")
        else:
            table.add_row(key, str(value))
    return table


def cmd_bounds(config: ExperimentConfig) -> Path:
    """Theory constants and dimension estimates of the initial datum.

    With a k value, W0 and Y0 come from the projection of the first seed;
    otherwise W0 = V0 and Y0 = X0. The controlled estimate uses the
    time-to-region bound when it is finite and the horizon otherwise.
    """
    setup = Setup(config)
    out = output_dir(config)
    params = setup.params
    M = None
    if config.k_values:
        M = projection_for(config.family, config.k_values[0], params.d, config.seeds[0])
    consts = theory_for(setup.initial, params, M)
    T = consts.That if math.isfinite(consts.That) and consts.That > 0 else setup.horizon
    estimate = dimension_estimate(
        params, T, config.eps, config.delta, consts.V0, consts.X0
    )
    uncontrolled = uncontrolled_dimension_estimate(
        params.N, params.d, setup.horizon, consts.V0, config.delta, config.eps
    )

    data = _header("bounds", setup)
    data["theory"] = consts.as_dict()
    data["dimension_estimate"] = {**estimate.as_dict(), "time": T}
    data["uncontrolled_estimate"] = uncontrolled._asdict()
    if M is not None:
        data["E_M"] = exactness_at_zero(M, setup.initial.v)
    path = out / "bounds.json"
    write_json(path, data)

    if config.verbose and not logger.is_suppressed():
        logger.console.print(_value_table("Theory constants", consts.as_dict()))
        logger.console.print(
            _value_table("Projected dimension estimate", data["dimension_estimate"])
        )
        logger.console.print(
            _value_table("Uncontrolled dimension estimate", data["uncontrolled_estimate"])
        )
    if not consts.feasible:
        logger.log_warning_panel("Theorem hypotheses fail: " + "; ".join(consts.issues))
    return path


def cmd_gen_config(config: ExperimentConfig, output: str | Path | None = None) -> Path:
    """Write the initial state of a named configuration to a text file."""
    if config.config_name == "file":
        raise ValueError("gen-config needs a named configuration")
    params = config.model_params()
    state = config.initial_state(params)
    path = (
        Path(output)
        if output is not None
        else output_dir(config) / f"{config.config_name}_s{config.config_seed}.txt"
    )
    save_initial_state(path, state)
    if config.verbose:
        logger.log_success_panel(
            f"Wrote the {config.config_name} initial state "
            f"(N={params.N}, d={params.d}) to `{path}`"
        )
    return path
