"""
Right-hand side of the controlled Cucker-Smale system and the sampled RK4
integrator.

Controls are evaluated at the sample times ``n * tau`` only and held constant
over the following interval.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
from scipy.spatial.distance import cdist

from .model import (
    ControlVector,
    FlockState,
    FloatArray,
    ModelParams,
    Moments,
    gamma_squared,
    kernel_from_squared,
    moments,
)
from .seeding import STREAM_CONTROL, check_seed, rng_for

# absolute slack on the sampled V bound
DECAY_SLACK = 1e-9


class SimulationBlowUp(FloatingPointError):
    """A non-finite coordinate appeared while integrating."""

    def __init__(self, step: int | None, t: float, quantity: str) -> None:
        self.step = step
        self.t = t
        self.quantity = quantity
        where = f"step {step}" if step is not None else "a step"
        super().__init__(
            f"non-finite {quantity} after {where} (t={t:.6g}); "
            "try a smaller sampling time or control budget"
        )


@dataclass(frozen=True, eq=False)
class Derivative:
    dx: FloatArray
    dv: FloatArray


def _field(
    x: FloatArray, v: FloatArray, u: FloatArray, params: ModelParams
) -> tuple[FloatArray, FloatArray]:
    n = x.shape[0]
    weights = kernel_from_squared(cdist(x, x, "sqeuclidean"), params)
    # the j = i term cancels: (A v)_i - (sum_j A_ij) v_i
    dv = (weights @ v - weights.sum(axis=1)[:, None] * v) / n + u
    return v, dv


def _check_control(state: FlockState, control: ControlVector) -> None:
    if control.entries.shape != state.x.shape:
        raise ValueError(
            f"control shape {control.entries.shape} does not match state {state.x.shape}"
        )


def rhs(state: FlockState, control: ControlVector, params: ModelParams) -> Derivative:
    """Evaluate dx_i = v_i and dv_i = (1/N) sum_j a(|x_i - x_j|)(v_j - v_i) + u_i."""
    _check_control(state, control)
    dx, dv = _field(state.x, state.v, control.entries, params)
    return Derivative(dx=dx.copy(), dv=dv)


def rk4_step(
    state: FlockState,
    control: ControlVector,
    h: float,
    params: ModelParams,
    *,
    t_next: float | None = None,
) -> FlockState:
    """One classical RK4 step of width ``h`` with the control frozen.

    Args:
        state: State at the start of the step.
        control: Control held constant over the step.
        h: Step width, ``h == 0`` returns an equal state.
        params: Model parameters.
        t_next: Time stamp of the result; defaults to ``state.t + h``.

    Raises:
        SimulationBlowUp: If the result holds a non-finite coordinate.
    """
    if h < 0:
        raise ValueError(f"step width must be nonnegative, got {h}")
    _check_control(state, control)
    u = control.entries
    x, v = state.x, state.v

    k1x, k1v = _field(x, v, u, params)
    k2x, k2v = _field(x + 0.5 * h * k1x, v + 0.5 * h * k1v, u, params)
    k3x, k3v = _field(x + 0.5 * h * k2x, v + 0.5 * h * k2v, u, params)
    k4x, k4v = _field(x + h * k3x, v + h * k3v, u, params)

    x_new = x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    v_new = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    t = state.t + h if t_next is None else t_next
    if not np.all(np.isfinite(x_new)):
        raise SimulationBlowUp(None, t, "main state x")
    if not np.all(np.isfinite(v_new)):
        raise SimulationBlowUp(None, t, "consensus parameter v")
    drift = state.vbar_drift + h * u.mean(axis=0)
    return FlockState(x_new, v_new, t=t, vbar_drift=drift)


def advance_interval(
    state: FlockState,
    control: ControlVector,
    params: ModelParams,
    n: int,
    substeps: int = 1,
) -> FlockState:
    """Integrate over [n tau, (n+1) tau) and stamp the result with (n+1) tau."""
    h = params.tau / substeps
    try:
        for s in range(substeps):
            t_next = (n + 1) * params.tau if s == substeps - 1 else None
            state = rk4_step(state, control, h, params, t_next=t_next)
    except SimulationBlowUp as e:
        raise SimulationBlowUp(n, (n + 1) * params.tau, e.quantity) from e
    return state


class Sample(NamedTuple):
    n: int
    t: float
    moments: Moments
    gamma_sq: float
    margin: float
    control_index: int | None
    magnitude: float
    nonzero: int
    state: FlockState | None


class Assessment(NamedTuple):
    moments: Moments
    gamma_sq: float
    margin: float


def assess(state: FlockState, params: ModelParams) -> Assessment:
    """Moments, gamma(X)^2 and consensus margin of a state."""
    m = moments(state)
    gamma_sq = gamma_squared(m.X, params)
    margin = -math.inf if math.isinf(gamma_sq) else m.V - gamma_sq
    return Assessment(m, gamma_sq, margin)


def make_sample(
    n: int,
    state: FlockState,
    assessment: Assessment,
    control: ControlVector,
    params: ModelParams,
    store_state: bool,
) -> Sample:
    return Sample(
        n=n,
        t=n * params.tau,
        moments=assessment.moments,
        gamma_sq=assessment.gamma_sq,
        margin=assessment.margin,
        control_index=control.active_index,
        magnitude=control.magnitude,
        nonzero=control.nonzero_count,
        state=state if store_state else None,
    )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples of one sampled run on the grid ``n * tau``."""

    samples: tuple[Sample, ...]
    params: ModelParams
    seed: int | None
    final_state: FlockState
    switch_off_step: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.final_state.dim

    @property
    def times(self) -> FloatArray:
        return np.array([s.t for s in self.samples])

    @property
    def X(self) -> FloatArray:
        return np.array([s.moments.X for s in self.samples])

    @property
    def V(self) -> FloatArray:
        return np.array([s.moments.V for s in self.samples])

    @property
    def margins(self) -> FloatArray:
        return np.array([s.margin for s in self.samples])

    @property
    def active(self) -> list[bool]:
        return [s.magnitude > 0 for s in self.samples]

    @property
    def index_sequence(self) -> list[int | None]:
        return [s.control_index for s in self.samples]

    @property
    def switch_off_time(self) -> float | None:
        if self.switch_off_step is None:
            return None
        return self.switch_off_step * self.params.tau

    def states(self) -> list[FlockState]:
        if any(s.state is None for s in self.samples):
            raise ValueError("trajectory was recorded without state snapshots")
        return [s.state for s in self.samples]  # type: ignore[misc]


class SampledPolicy(Protocol):
    """A feedback law evaluated once per sampling interval."""

    def switch_off(self, n: int, state: FlockState, m: Moments, margin: float) -> bool:
        """Whether the control is switched off for good at sample ``n``."""
        ...

    def control(
        self, state: FlockState, params: ModelParams, rng: np.random.Generator
    ) -> ControlVector:
        """The control applied over the interval starting at ``state.t``."""
        ...


def step_count(horizon: float, params: ModelParams) -> int:
    """Number of sampling intervals covering ``horizon``, at least one."""
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    # tolerate horizons that are a multiple of tau up to rounding
    return max(1, math.ceil(horizon / params.tau - 1e-9))


def run_sampled(
    initial: FlockState,
    strategy: SampledPolicy,
    horizon: float,
    params: ModelParams,
    seed: int,
    *,
    substeps: int = 1,
    store_states: bool = True,
    stop_at_switch_off: bool = False,
) -> Trajectory:
    """Simulate the sampling solution of a feedback strategy.

    The switch-off test runs at the beginning of each interval, before the
    control is computed. Once it fires the control stays zero.

    Args:
        initial: State at time 0.
        strategy: Feedback law.
        horizon: Final time, rounded up to a multiple of ``params.tau``.
        params: Model parameters.
        seed: Run seed, the control stream is a substream of it.
        substeps: RK4 steps per sampling interval.
        store_states: Keep a state snapshot in every sample.
        stop_at_switch_off: End the run at the switch-off sample.
    """
    check_seed(seed)
    if substeps < 1:
        raise ValueError(f"substeps must be a positive integer, got {substeps}")
    if initial.n_agents != params.N:
        raise ValueError(
            f"initial state has {initial.n_agents} agents, params say {params.N}"
        )
    n_steps = step_count(horizon, params)
    rng = rng_for(seed, STREAM_CONTROL)
    zero = ControlVector.zeros(initial.n_agents, initial.dim)

    state = initial
    samples: list[Sample] = []
    switch_off_step: int | None = None
    for n in range(n_steps + 1):
        current = assess(state, params)
        if switch_off_step is None and strategy.switch_off(
            n, state, current.moments, current.margin
        ):
            switch_off_step = n
        if switch_off_step is not None or n == n_steps:
            control = zero
        else:
            control = strategy.control(state, params, rng)
        samples.append(make_sample(n, state, current, control, params, store_states))
        if n == n_steps or (stop_at_switch_off and switch_off_step is not None):
            break
        state = advance_interval(state, control, params, n, substeps)

    return Trajectory(
        samples=tuple(samples),
        params=params,
        seed=seed,
        final_state=state,
        switch_off_step=switch_off_step,
    )


def _decay_prefix(V: Sequence[float], tau: float, eta: float) -> int:
    """Last sample index up to which the discrete slope condition holds."""
    end = 0
    for n in range(len(V) - 1):
        if V[n + 1] - V[n] > -eta * tau * math.sqrt(max(V[n], 0.0)):
            break
        end = n + 1
    return end


def check_decay_lemma(trajectory: Trajectory, eta: float) -> list[int]:
    """Check the sampled decay bounds implied by V' <= -eta sqrt(V).

    On the prefix where the finite-difference slope condition holds, asserts
    V(t) <= (sqrt(V(0)) - eta t / 2)^2 and X(t) <= 2 X(0) + 2 V(0)^2 / eta^2.

    Returns:
        Sample indices violating one of the two bounds.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    V = trajectory.V
    X = trajectory.X
    end = _decay_prefix(V, trajectory.params.tau, eta)
    V0, X0 = V[0], X[0]
    x_bound = 2.0 * X0 + 2.0 * V0 * V0 / (eta * eta)
    violations = []
    for n in range(end + 1):
        t = trajectory.samples[n].t
        root = max(math.sqrt(V0) - 0.5 * eta * t, 0.0)
        v_bound = root * root
        if V[n] > v_bound * (1.0 + 1e-9) + DECAY_SLACK or X[n] > x_bound * (1.0 + 1e-9):
            violations.append(n)
    return violations


def estimate_decay_rate(trajectory: Trajectory) -> float:
    """Largest eta with V_{n+1} - V_n <= -eta tau sqrt(V_n) on the active prefix.

    Returns 0.0 when the control is never active or V does not decay.
    """
    V = trajectory.V
    tau = trajectory.params.tau
    last = trajectory.switch_off_step
    if last is None:
        last = len(V) - 1
    rates = [
        -(V[n + 1] - V[n]) / (tau * math.sqrt(V[n]))
        for n in range(last)
        if trajectory.samples[n].magnitude > 0 and V[n] > 0
    ]
    if not rates:
        return 0.0
    return max(min(rates), 0.0)
