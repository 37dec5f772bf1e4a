"""
Sampled sparse feedback strategies.

``SP`` steers the agent farthest from the mean, ``U`` steers every agent with
an equal share of the budget, ``R`` steers a uniformly drawn agent and ``DR``
picks the agent on the projected low-dimensional twin. All strategies switch
off for good at the first sample inside the consensus region.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from .analysis import compute_constants
from .dynamics import (
    Sample,
    Trajectory,
    advance_interval,
    assess,
    make_sample,
    run_sampled,
    step_count,
)
from .jl import JLFamily, ProjectionMatrix, generate
from .model import (
    ControlVector,
    FlockState,
    FloatArray,
    ModelParams,
    Moments,
    consensus_margin,
)
from .seeding import STREAM_CONTROL, check_seed, rng_for

__all__ = [
    "ControlVector",
    "CoupledRun",
    "DRMode",
    "PerpArgmax",
    "RunRecord",
    "Strategy",
    "StrategyKind",
    "admissible_projection",
    "control_random",
    "control_sp",
    "control_uniform",
    "run_dr",
    "run_strategy",
    "select_max_perp_index",
]

# candidate seeds of admissible_projection
ADMISSIBLE_ATTEMPTS = 64
ADMISSIBLE_STRIDE = 1_000_003


class StrategyKind(str, Enum):
    NONE = "none"
    SP = "sp"
    U = "u"
    R = "r"
    DR = "dr"


class DRMode(str, Enum):
    THEORETICAL = "theoretical"
    EXPERIMENTAL = "experimental"


class MeanSource(str, Enum):
    OBSERVED = "observed"
    RECONSTRUCTED = "reconstructed"


class PerpArgmax(NamedTuple):
    index: int
    norm: float

    @property
    def degenerate(self) -> bool:
        """All agents sit at the mean."""
        return self.norm == 0.0


def select_max_perp_index(v: ArrayLike) -> PerpArgmax:
    """Smallest index maximizing |v_i - mean(v)|."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, dim) array, got {arr.shape}")
    perp = arr - arr.mean(axis=0)
    norms = np.linalg.norm(perp, axis=1)
    # argmax returns the first maximizer
    index = int(np.argmax(norms))
    return PerpArgmax(index, float(norms[index]))


def _steer(row: FloatArray, mean: FloatArray, size: float) -> FloatArray | None:
    # -size * perp / |perp|, or None when the agent sits at the mean
    perp = row - mean
    norm = float(np.linalg.norm(perp))
    if norm == 0.0:
        return None
    return -size * perp / norm


def _single(state: FlockState, index: int, entry: FloatArray | None) -> ControlVector:
    entries = np.zeros_like(state.v)
    if entry is None:
        return ControlVector(entries)
    entries[index] = entry
    return ControlVector(entries, active_index=index)


def control_sp(state: FlockState, params: ModelParams) -> ControlVector:
    """Steer the agent farthest from the mean with the whole budget."""
    index = select_max_perp_index(state.v).index
    mean = state.v.mean(axis=0)
    return _single(state, index, _steer(state.v[index], mean, params.theta))


def control_uniform(state: FlockState, params: ModelParams) -> ControlVector:
    """Steer every agent towards the mean with theta / N each."""
    mean = state.v.mean(axis=0)
    share = params.theta / state.n_agents
    entries = np.zeros_like(state.v)
    for i in range(state.n_agents):
        entry = _steer(state.v[i], mean, share)
        if entry is not None:
            entries[i] = entry
    return ControlVector(entries)


def control_random(
    state: FlockState, params: ModelParams, rng: np.random.Generator
) -> ControlVector:
    """Steer a uniformly drawn agent with the whole budget."""
    index = int(rng.integers(state.n_agents))
    mean = state.v.mean(axis=0)
    return _single(state, index, _steer(state.v[index], mean, params.theta))


@dataclass(frozen=True, eq=False)
class Strategy:
    """A sampled feedback strategy.

    DR strategies carry the projection, the threshold mode that hands the
    high system over to the random strategy, an optional explicit threshold
    ``Delta`` for the theoretical mode and the source of the high mean.
    """

    kind: StrategyKind
    projection: ProjectionMatrix | None = None
    mode: DRMode = DRMode.EXPERIMENTAL
    Delta: float | None = None
    mean_source: MeanSource = MeanSource.OBSERVED

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "mode", DRMode(self.mode))
        object.__setattr__(self, "mean_source", MeanSource(self.mean_source))
        if self.kind is StrategyKind.DR and self.projection is None:
            raise ValueError("a DR strategy needs a projection matrix")
        if self.Delta is not None and not self.Delta > 0:
            raise ValueError(f"Delta must be positive, got {self.Delta}")

    @classmethod
    def of(cls, name: str | StrategyKind) -> Strategy:
        kind = name if isinstance(name, StrategyKind) else StrategyKind(name.lower())
        if kind is StrategyKind.DR:
            raise ValueError("use Strategy.dr(M, ...) for projected strategies")
        return cls(kind)

    @classmethod
    def dr(
        cls,
        M: ProjectionMatrix,
        mode: DRMode | str = DRMode.EXPERIMENTAL,
        delta: float | None = None,
        mean_source: MeanSource | str = MeanSource.OBSERVED,
    ) -> Strategy:
        return cls(StrategyKind.DR, M, DRMode(mode), delta, MeanSource(mean_source))

    @property
    def label(self) -> str:
        return self.kind.value

    def switch_off(self, n: int, state: FlockState, m: Moments, margin: float) -> bool:
        return margin <= 0

    def control(
        self, state: FlockState, params: ModelParams, rng: np.random.Generator
    ) -> ControlVector:
        if self.kind is StrategyKind.NONE:
            return ControlVector.zeros(state.n_agents, state.dim)
        if self.kind is StrategyKind.SP:
            return control_sp(state, params)
        if self.kind is StrategyKind.U:
            return control_uniform(state, params)
        if self.kind is StrategyKind.R:
            return control_random(state, params, rng)
        raise ValueError("DR controls need the coupled run, use run_dr")


def first_half_time(trajectory: Trajectory) -> float | None:
    """First sample time at which the margin has halved from its initial value."""
    margins = trajectory.margins
    if margins[0] <= 0:
        return 0.0
    hits = np.flatnonzero(margins <= margins[0] / 2.0)
    return float(trajectory.samples[hits[0]].t) if hits.size else None


@dataclass(frozen=True, eq=False)
class CoupledRun:
    """A DR run: the governed high system and its low-dimensional twin."""

    high: Trajectory
    low: Trajectory
    projection: ProjectionMatrix
    mode: DRMode
    T0: float | None
    T0_5: float | None
    TS: float | None
    seed: int
    Delta: float | None = None


def _dr_threshold(
    mode: DRMode, Delta: float | None, low_moments: Moments, low_margin: float
) -> bool:
    if mode is DRMode.THEORETICAL:
        return low_moments.V <= (2.0 * Delta) ** 2  # type: ignore[operator]
    return low_margin <= 0


def run_dr(
    initial_high: FlockState,
    M: ProjectionMatrix,
    params: ModelParams,
    mode: DRMode | str,
    seed: int,
    *,
    horizon: float,
    Delta: float | None = None,
    mean_source: MeanSource | str = MeanSource.OBSERVED,
    substeps: int = 1,
    store_states: bool = True,
) -> CoupledRun:
    """Drive the high system with indices chosen on its projected twin.

    At every sample time: the control stops for good once the high system is
    in the consensus region (T0); once the low system crosses its threshold
    the high system is steered by the random strategy from then on (TS);
    otherwise the agent maximizing |w_i - mean(w)| is steered in both
    systems. With the theoretical mode the threshold is W <= (2 Delta)^2,
    ``Delta`` defaulting to the value computed from the initial datum.
    """
    check_seed(seed)
    mode = DRMode(mode)
    mean_source = MeanSource(mean_source)
    if initial_high.n_agents != params.N:
        raise ValueError(
            f"initial state has {initial_high.n_agents} agents, params say {params.N}"
        )
    if initial_high.dim != M.d:
        raise ValueError(
            f"state dimension {initial_high.dim} does not match M ({M.k}x{M.d})"
        )
    high = initial_high
    low = initial_high.project(M)
    if mode is DRMode.THEORETICAL and Delta is None:
        m_high, m_low = assess(high, params).moments, assess(low, params).moments
        consts = compute_constants(m_high.X, m_high.V, m_low.V, m_low.X, params)
        if consts.degenerate or not consts.Delta > 0:
            raise ValueError(
                f"theoretical threshold unavailable: {'; '.join(consts.issues)}"
            )
        Delta = consts.Delta

    n_steps = step_count(horizon, params)
    rng = rng_for(seed, STREAM_CONTROL)
    vbar0 = initial_high.v.mean(axis=0)
    zero_high = ControlVector.zeros(params.N, high.dim)
    zero_low = ControlVector.zeros(params.N, low.dim)

    high_samples: list[Sample] = []
    low_samples: list[Sample] = []
    off_step: int | None = None
    switch_step: int | None = None
    for n in range(n_steps + 1):
        hi = assess(high, params)
        lo = assess(low, params)
        if off_step is None and hi.margin <= 0:
            off_step = n
        if (
            off_step is None
            and switch_step is None
            and _dr_threshold(mode, Delta, lo.moments, lo.margin)
        ):
            switch_step = n

        if off_step is not None or n == n_steps:
            u_high, u_low = zero_high, zero_low
        elif switch_step is not None:
            u_high, u_low = control_random(high, params, rng), zero_low
        else:
            index = select_max_perp_index(low.v).index
            if mean_source is MeanSource.OBSERVED:
                mean = high.v.mean(axis=0)
            else:
                mean = high.mean_velocity(reconstructed_from=vbar0)
            u_high = _single(high, index, _steer(high.v[index], mean, params.theta))
            u_low = _single(
                low, index, _steer(low.v[index], low.v.mean(axis=0), params.theta)
            )
        high_samples.append(make_sample(n, high, hi, u_high, params, store_states))
        low_samples.append(make_sample(n, low, lo, u_low, params, store_states))
        if n == n_steps:
            break
        high = advance_interval(high, u_high, params, n, substeps)
        low = advance_interval(low, u_low, params, n, substeps)

    if switch_step is None:
        switch_step = off_step
    high_traj = Trajectory(tuple(high_samples), params, seed, high, off_step)
    low_traj = Trajectory(tuple(low_samples), params, seed, low, switch_step)
    return CoupledRun(
        high=high_traj,
        low=low_traj,
        projection=M,
        mode=mode,
        T0=high_traj.switch_off_time,
        T0_5=first_half_time(high_traj),
        TS=low_traj.switch_off_time,
        seed=seed,
        Delta=Delta,
    )


def admissible_projection(
    initial: FlockState,
    family: JLFamily | str,
    k: int,
    params: ModelParams,
    seed: int,
    *,
    attempts: int = ADMISSIBLE_ATTEMPTS,
) -> ProjectionMatrix:
    """Draw a matrix whose twin starts no closer to consensus than the flock.

    Candidate ``j`` is ``generate(family, k, d, seed + j * ADMISSIBLE_STRIDE)``;
    the first one with W(0) - gamma(Y(0))^2 >= V(0) - gamma(X(0))^2 is
    returned. A twin that starts inside that margin usually reaches its
    threshold first and hands the flock to R for the rest of the run.

    Raises:
        ValueError: No candidate qualifies within ``attempts`` draws.
    """
    check_seed(seed)
    if attempts < 1:
        raise ValueError(f"attempts must be positive, got {attempts}")
    target = consensus_margin(initial, params)
    for j in range(attempts):
        M = generate(family, k, initial.dim, seed + j * ADMISSIBLE_STRIDE)
        if consensus_margin(initial.project(M), params) >= target:
            return M
    raise ValueError(
        f"no {JLFamily(family).value} matrix with k={k} keeps the initial margin "
        f"{target:.6g} in {attempts} draws from seed {seed}"
    )


@dataclass(frozen=True, eq=False)
class RunRecord:
    """Result of one strategy run with its summary metrics."""

    strategy: Strategy
    trajectory: Trajectory
    T0: float | None
    T0_5: float | None
    TS: float | None
    seed: int
    low: Trajectory | None = None
    coupled: CoupledRun | None = None

    @property
    def final_margin(self) -> float:
        return float(self.trajectory.samples[-1].margin)

    @property
    def reached(self) -> bool:
        return self.T0 is not None

    def index_sequence(self) -> list[int | None]:
        """0-based controlled agent per sample, None where no single agent is steered."""
        return self.trajectory.index_sequence

    def rows(self) -> list[dict[str, float | int | bool | None]]:
        """Plot-ready rows, one per sample; control_index is 1-based."""
        rows = []
        low = self.low.samples if self.low is not None else [None] * len(self.trajectory)
        for sample, twin in zip(self.trajectory.samples, low):
            index = sample.control_index
            rows.append(
                {
                    "t": sample.t,
                    "X": sample.moments.X,
                    "V": sample.moments.V,
                    "gamma_sq": sample.gamma_sq,
                    "margin": sample.margin,
                    "W": twin.moments.V if twin is not None else None,
                    "Y": twin.moments.X if twin is not None else None,
                    "control_index": None if index is None else index + 1,
                    "active": sample.magnitude > 0,
                }
            )
        return rows

    def summary(self) -> dict[str, object]:
        data: dict[str, object] = {
            "strategy": self.strategy.label,
            "seed": self.seed,
            "T0": self.T0,
            "T0_5": self.T0_5,
            "TS": self.TS,
            "reached": self.reached,
            "final_margin": self.final_margin,
            "initial_margin": float(self.trajectory.samples[0].margin),
        }
        if self.strategy.kind is StrategyKind.DR:
            M = self.strategy.projection
            data.update(
                k=M.k,  # type: ignore[union-attr]
                family=M.family.value,  # type: ignore[union-attr]
                matrix_seed=M.seed,  # type: ignore[union-attr]
                mode=self.strategy.mode.value,
                curve_guarantee=M.family.curve_guarantee,  # type: ignore[union-attr]
            )
        return data


def run_strategy(
    initial: FlockState,
    strategy: Strategy,
    horizon: float,
    params: ModelParams,
    seed: int,
    *,
    substeps: int = 1,
    store_states: bool = False,
) -> RunRecord:
    """Run one strategy and collect T0, T0.5 and (for DR) TS.

    T0 is None when the horizon ends outside the consensus region; the final
    margin is then in the record.
    """
    if strategy.kind is StrategyKind.DR:
        coupled = run_dr(
            initial,
            strategy.projection,  # type: ignore[arg-type]
            params,
            strategy.mode,
            seed,
            horizon=horizon,
            Delta=strategy.Delta,
            mean_source=strategy.mean_source,
            substeps=substeps,
            store_states=store_states,
        )
        return RunRecord(
            strategy=strategy,
            trajectory=coupled.high,
            T0=coupled.T0,
            T0_5=coupled.T0_5,
            TS=coupled.TS,
            seed=seed,
            low=coupled.low,
            coupled=coupled,
        )
    trajectory = run_sampled(
        initial,
        strategy,
        horizon,
        params,
        seed,
        substeps=substeps,
        store_states=store_states,
    )
    return RunRecord(
        strategy=strategy,
        trajectory=trajectory,
        T0=trajectory.switch_off_time,
        T0_5=first_half_time(trajectory),
        TS=None,
        seed=seed,
    )


def budget_ok(control: ControlVector, params: ModelParams, tol: float = 1e-12) -> bool:
    """l1(l2) budget check, sum_i |u_i| <= theta."""
    return control.magnitude <= params.theta + tol


def is_sparse(control: ControlVector) -> bool:
    return control.nonzero_count <= 1

