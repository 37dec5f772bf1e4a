"""
Initial configurations and initial-state files.

Named generators follow their closed-form recipes with 1-based agent index
``i`` and coordinate index ``j``; the random ones draw from the configuration
substream of the seed.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import stats

from .model import FlockState, FloatArray, ModelParams, consensus_margin
from .seeding import STREAM_CONFIG, rng_for

CAUCHY_SCALE = 1.0 / 40.0
OUTLIER_SPEED = 10.0
GEOMETRIC_RATIO = 1.2
SEED_SCAN_LIMIT = 5000

# parameter tables: N, d, beta, theta, tau (K = sigma = 1) and a horizon
# long enough for the uniform strategy to reach consensus
PRESETS: dict[str, dict[str, float | int]] = {
    "outlier": dict(N=9, d=100, beta=0.6, theta=5.0, tau=0.01, horizon=150.0),
    "geometric": dict(N=15, d=500, beta=0.65, theta=20.0, tau=0.01, horizon=100.0),
    "cauchy": dict(N=25, d=100, beta=0.6, theta=5.0, tau=0.01, horizon=300.0),
    "gaussian": dict(N=10, d=500, beta=0.65, theta=20.0, tau=0.005, horizon=200.0),
    "uniform": dict(N=15, d=200, beta=0.8, theta=5.0, tau=0.001, horizon=100.0),
}
CONFIG_NAMES = (*PRESETS, "file")


def preset_params(name: str, **overrides: float | int) -> ModelParams:
    """Model parameters of a named configuration, with optional overrides."""
    if name not in PRESETS:
        raise ValueError(
            f"unknown configuration {name!r}, expected one of {sorted(PRESETS)}"
        )
    table = {key: value for key, value in PRESETS[name].items() if key != "horizon"}
    table.update({key: value for key, value in overrides.items() if value is not None})
    return ModelParams(
        N=int(table["N"]),
        d=int(table["d"]),
        K=float(table.get("K", 1.0)),
        sigma=float(table.get("sigma", 1.0)),
        beta=float(table["beta"]),
        theta=float(table["theta"]),
        tau=float(table["tau"]),
    )


def _grid(N: int, d: int) -> tuple[FloatArray, FloatArray]:
    i = np.arange(1, N + 1, dtype=np.float64)[:, None]
    j = np.arange(1, d + 1, dtype=np.float64)[None, :]
    return i, j


def _outlier(params: ModelParams) -> FlockState:
    i, j = _grid(params.N, params.d)
    x = 0.5 * np.cos(i + j * math.sqrt(2.0))
    v = np.sin(i * math.sqrt(3.0) - j)
    v[-1] = OUTLIER_SPEED
    return FlockState(x, v)


def _geometric(params: ModelParams) -> FlockState:
    i, j = _grid(params.N, params.d)
    x = 0.5 * np.cos(i + j * math.sqrt(2.0))
    # the last agent follows the same rule, no outlier term
    v = GEOMETRIC_RATIO ** ((i - 1.0) / 2.0) * np.sin(i * math.sqrt(3.0) - j)
    return FlockState(x, v)


def _cauchy(params: ModelParams, seed: int) -> FlockState:
    rng = rng_for(seed, STREAM_CONFIG)
    shape = (params.N, params.d)
    x = rng.standard_normal(shape)
    u = rng.uniform(size=shape)
    v = stats.cauchy.ppf(u, loc=0.0, scale=CAUCHY_SCALE)
    return FlockState(x, v)


def _gaussian(params: ModelParams, seed: int) -> FlockState:
    rng = rng_for(seed, STREAM_CONFIG)
    shape = (params.N, params.d)
    x = rng.normal(0.0, 10.0, shape)
    v = rng.normal(0.0, 8.0, shape)
    return FlockState(x, v)


def _uniform(params: ModelParams) -> FlockState:
    i, j = _grid(params.N, params.d)
    x = np.cos(i + j * math.sqrt(2.0))
    return FlockState(x, x.copy())


def generate_config(name: str, params: ModelParams, seed: int = 0) -> FlockState:
    """Initial state of a named configuration in dimension ``params.d``.

    Args:
        name: One of outlier, geometric, cauchy, gaussian, uniform.
        params: Agent count and dimension are taken from here.
        seed: Used by the random configurations only.
    """
    if name == "outlier":
        return _outlier(params)
    if name == "geometric":
        return _geometric(params)
    if name == "cauchy":
        return _cauchy(params, seed)
    if name == "gaussian":
        return _gaussian(params, seed)
    if name == "uniform":
        return _uniform(params)
    raise ValueError(
        f"unknown configuration {name!r}, expected one of {sorted(PRESETS)}"
    )


def seeds_near_margin(
    name: str,
    params: ModelParams,
    target: float,
    rtol: float,
    count: int,
    *,
    start: int = 0,
    limit: int = SEED_SCAN_LIMIT,
) -> list[int]:
    """First ``count`` seeds with initial margin within ``rtol`` of ``target``.

    Heavy-tailed configurations (cauchy) spread their consensus time over
    orders of magnitude; screening on the initial margin V(0) - gamma(X(0))^2
    picks draws comparable to a given reference datum.

    Raises:
        ValueError: Fewer than ``count`` seeds qualify in ``limit`` draws.
    """
    if count < 1 or rtol <= 0 or target <= 0:
        raise ValueError("count, rtol and target must be positive")
    seeds: list[int] = []
    for seed in range(start, start + limit):
        margin = consensus_margin(generate_config(name, params, seed), params)
        if abs(margin - target) <= rtol * target:
            seeds.append(seed)
            if len(seeds) == count:
                return seeds
    raise ValueError(
        f"only {len(seeds)} {name} seeds in [{start}, {start + limit}) have an initial "
        f"margin within {rtol:.0%} of {target:.6g}"
    )


def save_initial_state(path: str | Path, state: FlockState) -> None:
    """Write ``N dim`` then N rows of x and N rows of v, whitespace separated."""
    grid = np.vstack([state.x, state.v])
    try:
        np.savetxt(
            path, grid, fmt="%.17g", header=f"{state.n_agents} {state.dim}", comments=""
        )
    except OSError as e:
        raise OSError(f"cannot write initial state to {path}: {e}") from e


def load_initial_state(path: str | Path) -> FlockState:
    try:
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            grid = np.loadtxt(f, ndmin=2)
    except OSError as e:
        raise OSError(f"cannot read initial state from {path}: {e}") from e
    if len(header) != 2 or not all(token.isdigit() for token in header):
        raise ValueError(f"{path}: first line must be 'N dim'")
    n, dim = int(header[0]), int(header[1])
    if n < 1 or dim < 1:
        raise ValueError(f"{path}: N and dim must be positive")
    if grid.shape != (2 * n, dim):
        raise ValueError(
            f"{path}: expected {2 * n} rows of {dim} values, got {grid.shape}"
        )
    return FlockState(grid[:n], grid[n:])
