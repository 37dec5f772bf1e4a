"""
Theoretical constants, error bounds and certificate checks for coupled
high/low-dimensional runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from scipy.spatial.distance import pdist

from .dynamics import Trajectory
from .jl import LEMMA_C, LEMMA_CC, ProjectionMatrix
from .model import FloatArray, ModelParams, gamma_functional, lipschitz_constant

if TYPE_CHECKING:  # pragma: no cover
    from .control import CoupledRun

ALPHA_NOTE = (
    "alpha = sqrt(2) N / (c theta) is used as stated; the integral bound it stands "
    "for, int sqrt(2 V) <= alpha V(0), carries an extra factor V(0)"
)


def _safe_exp(value: float) -> float:
    return math.exp(value) if value < 709.0 else math.inf


@dataclass(frozen=True)
class TheoryConstants:
    """Constants of the reduction and convergence estimates for one initial datum."""

    X0: float
    V0: float
    W0: float
    Y0: float
    N: int
    theta: float
    tau: float
    a0: float
    La: float
    K1: float
    K2: float
    K3: float
    K4: float
    Knorm: float
    Xbar: float
    Ybar: float
    Delta: float
    That: float
    tau0: float
    alpha: float
    eps_prime: float
    log_eps_prime: float
    jl_delta: float
    c: float = LEMMA_C
    Cc: float = LEMMA_CC
    degenerate: bool = False
    issues: tuple[str, ...] = field(default=())

    @property
    def Gamma(self) -> float:
        return (2.0 * self.Delta) ** 2

    @property
    def feasible(self) -> bool:
        return not self.issues

    def as_dict(self) -> dict[str, object]:
        data: dict[str, object] = {
            name: getattr(self, name)
            for name in self.__dataclass_fields__
            if name != "issues"
        }
        data["Gamma"] = self.Gamma
        data["feasible"] = self.feasible
        data["issues"] = list(self.issues)
        return data


def _tau0(Delta: float, a0: float, N: int, V0: float, theta: float) -> float:
    # positive root of a0 theta tau^2 + (a0 sqrt(N V0) + theta) tau - Delta / 4
    qa = a0 * theta
    qb = a0 * math.sqrt(N) * math.sqrt(V0) + theta
    qc = Delta / 4.0
    return 2.0 * qc / (qb + math.sqrt(qb * qb + 4.0 * qa * qc))


def _controlled_log_rate(
    t: float,
    X0: float,
    V0: float,
    alpha: float,
    La: float,
    a0: float,
    Delta: float,
    params: ModelParams,
) -> float:
    """log of the controlled error bound at t divided by eps'."""
    N, theta = params.N, params.theta
    spread = 4.0 * La * math.sqrt(N * V0)
    slope = spread * (math.sqrt(2.0 * X0) + alpha) + theta / math.sqrt(N)
    rate = max(2.0 * a0 + 1.0, spread) + 8.0 * theta / Delta
    return 0.5 * math.log(N) + math.log(slope) + math.log(t) + t * rate


def compute_constants(
    X0: float, V0: float, W0: float, Y0: float, params: ModelParams
) -> TheoryConstants:
    """Evaluate the convergence and reduction constants.

    Never raises for an infeasible datum; the result lists what goes wrong in
    ``issues`` instead.
    """
    for name, value in (("X0", X0), ("V0", V0), ("W0", W0), ("Y0", Y0)):
        if value < 0:
            raise ValueError(f"{name} must be nonnegative, got {value}")
    N, theta, tau = params.N, params.theta, params.tau
    La = lipschitz_constant(params)
    a0 = params.a0
    c = LEMMA_C
    root_nw = math.sqrt(N * W0)
    K1 = La * root_nw * math.sqrt(2.0 * X0)
    K2 = 2.0 * La * root_nw
    K3 = 0.5 * La * root_nw * math.sqrt(2.0 * V0)
    alpha = math.sqrt(2.0) * N / (c * theta)
    K4 = La * root_nw * alpha
    Knorm = max(2.0 * a0 + 1.0, 2.0 * La * root_nw)
    Xbar = 2.0 * X0 + 2.0 * N * N * V0 * V0 / (c * c * theta * theta)
    Ybar = 2.0 * Y0 + 2.0 * N * N * W0 * W0 / (theta * theta)

    issues: list[str] = []
    gamma_bar = gamma_functional(Xbar, params)
    degenerate = math.isinf(gamma_bar)
    if degenerate:
        issues.append("Delta is degenerate: gamma is infinite for beta <= 1/2")
        Delta = math.inf
        That = tau0 = eps_prime = log_eps_prime = jl_delta = math.nan
    else:
        Delta = min(gamma_bar / LEMMA_CC, 0.5 * gamma_functional(4.0 * Xbar, params))
        # one sqrt(V0) term, as in the reference horizon tables
        That = (2.0 * N / theta) * (math.sqrt(V0) - 2.0 * Delta)
        if Delta <= 0:
            issues.append(f"Delta = {Delta:.6g} is not positive")
            tau0 = eps_prime = log_eps_prime = jl_delta = math.nan
        else:
            tau0 = _tau0(Delta, a0, N, V0, theta)
            horizon = max(That, 0.0) + tau
            log_eps_prime = math.log(Delta / 2.0) - _controlled_log_rate(
                horizon, X0, V0, alpha, La, a0, Delta, params
            )
            eps_prime = min(_safe_exp(log_eps_prime), math.nextafter(1.0, 0.0))
            jl_delta = eps_prime * (math.sqrt(2.0 * X0) + alpha) / 2.0
        if That <= 0:
            issues.append(
                f"T_hat = {That:.6g} is not positive (datum already near consensus)"
            )
    return TheoryConstants(
        X0=X0,
        V0=V0,
        W0=W0,
        Y0=Y0,
        N=N,
        theta=theta,
        tau=tau,
        a0=a0,
        La=La,
        K1=K1,
        K2=K2,
        K3=K3,
        K4=K4,
        Knorm=Knorm,
        Xbar=Xbar,
        Ybar=Ybar,
        Delta=Delta,
        That=That,
        tau0=tau0,
        alpha=alpha,
        eps_prime=eps_prime,
        log_eps_prime=log_eps_prime,
        jl_delta=jl_delta,
        degenerate=degenerate,
        issues=tuple(issues),
    )


@dataclass(frozen=True, eq=False)
class ErrorSeries:
    """Per-sample projection errors e_i = |y_i - M x_i| and |w_i - M v_i|.

    ``E_*`` are maxima over agents, ``E2_*`` root mean squares.
    """

    times: FloatArray
    e_x: FloatArray
    e_v: FloatArray
    E_x: FloatArray
    E_v: FloatArray
    E2_x: FloatArray
    E2_v: FloatArray
    theoretical_bound: FloatArray | None = None
    min_bound: FloatArray | None = None

    @property
    def total(self) -> FloatArray:
        return self.E_x + self.E_v


def error_series(high: Trajectory, low: Trajectory, M: ProjectionMatrix) -> ErrorSeries:
    """Projection errors between a high run and its low-dimensional twin."""
    if len(high) != len(low) or not np.array_equal(high.times, low.times):
        raise ValueError("high and low trajectories must share the sample grid")
    if high.dim != M.d or low.dim != M.k:
        raise ValueError(
            f"matrix is {M.k}x{M.d}, trajectories have dimensions "
            f"{high.dim} and {low.dim}"
        )
    rows_x, rows_v = [], []
    for hs, ls in zip(high.states(), low.states()):
        rows_x.append(np.linalg.norm(ls.x - M.apply(hs.x), axis=1))
        rows_v.append(np.linalg.norm(ls.v - M.apply(hs.v), axis=1))
    e_x, e_v = np.array(rows_x), np.array(rows_v)
    return ErrorSeries(
        times=high.times,
        e_x=e_x,
        e_v=e_v,
        E_x=e_x.max(axis=1),
        E_v=e_v.max(axis=1),
        E2_x=np.sqrt(np.mean(e_x * e_x, axis=1)),
        E2_v=np.sqrt(np.mean(e_v * e_v, axis=1)),
    )


class BoundPair(NamedTuple):
    gronwall: float
    min_bound: float


def uncontrolled_bound(
    t: float,
    consts: TheoryConstants,
    eps: float,
    delta: float,
    Mnorm: float,
    Vt: float,
    Wt: float,
    alpha: float | None = None,
) -> BoundPair:
    """Gronwall bound on E_x + E_v and the min-bound on E_v at time t.

    With ``alpha`` (a bound on int sqrt(2 V)) the quadratic eps K3 t^2 term
    is replaced by the linear eps K4 t term.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if alpha is None:
        core = (eps * consts.K1 + delta * consts.K2) * t + eps * consts.K3 * t * t
    else:
        K4 = consts.La * math.sqrt(consts.N * consts.W0) * alpha
        core = (eps * (consts.K1 + K4) + delta * consts.K2) * t
    core = 0.0 if core == 0.0 else core * _safe_exp(t * consts.Knorm)
    root_n = math.sqrt(consts.N)
    spread = Mnorm * math.sqrt(Vt) + math.sqrt(Wt)
    return BoundPair(gronwall=root_n * core, min_bound=root_n * min(core, spread))


def controlled_bound(
    t: float,
    consts: TheoryConstants,
    eps_prime: float,
    Delta: float,
    alpha: float,
    params: ModelParams,
    variant: str = "theorem",
) -> float:
    """Bound on E_v + E_x along a controlled coupled run.

    Valid up to min(T_hat + tau, T0).

    ``variant="proposition"`` swaps in the constants derived in the proof of
    the sampled-control estimate, 2 La sqrt(2 N W(0)) (sqrt(2 X(0)) + alpha)
    and 2 La sqrt(N W(0)).
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if t == 0 or eps_prime == 0:
        return 0.0
    N, theta = params.N, params.theta
    La, a0 = consts.La, consts.a0
    if variant == "theorem":
        return eps_prime * _safe_exp(
            _controlled_log_rate(t, consts.X0, consts.V0, alpha, La, a0, Delta, params)
        )
    if variant != "proposition":
        raise ValueError(
            f"unknown variant {variant!r}, expected 'theorem' or 'proposition'"
        )
    slope = (
        2.0 * La * math.sqrt(2.0 * N * consts.W0) * (math.sqrt(2.0 * consts.X0) + alpha)
        + theta / math.sqrt(N)
    )
    rate = max(2.0 * a0 + 1.0, 2.0 * La * math.sqrt(N * consts.W0)) + 8.0 * theta / Delta
    return eps_prime * math.sqrt(N) * slope * t * _safe_exp(t * rate)


class MeasuredDistortion(NamedTuple):
    eps: float
    delta: float


def measured_distortion(
    high: Trajectory, M: ProjectionMatrix, eps_cap: float = math.inf
) -> MeasuredDistortion:
    """Empirical JL parameters of ``M`` on all sampled differences x_i - x_j.

    Pairs distorted by more than ``eps_cap`` are charged to the small clause:
    their largest norm (before or after projection) becomes delta.
    """
    eps_hat = 0.0
    delta_hat = 0.0
    n = high.final_state.n_agents
    rows, cols = np.triu_indices(n, k=1)
    for state in high.states():
        diffs = state.x[rows] - state.x[cols]
        norms = np.linalg.norm(diffs, axis=1)
        images = np.linalg.norm(M.apply(diffs), axis=1)
        nonzero = norms > 0
        distortion = np.zeros_like(norms)
        distortion[nonzero] = np.abs(images[nonzero] / norms[nonzero] - 1.0)
        capped = distortion > eps_cap
        if np.any(~capped):
            eps_hat = max(eps_hat, float(distortion[~capped].max()))
        if np.any(capped):
            delta_hat = max(
                delta_hat, float(np.maximum(norms[capped], images[capped]).max())
            )
    return MeasuredDistortion(eps=eps_hat, delta=delta_hat)


@dataclass(frozen=True, eq=False)
class DominanceReport:
    series: ErrorSeries
    distortion: MeasuredDistortion
    Mnorm: float
    gronwall_violations: list[int]
    min_bound_violations: list[int]

    @property
    def dominated(self) -> bool:
        return not self.gronwall_violations and not self.min_bound_violations


def gronwall_dominance(
    high: Trajectory,
    low: Trajectory,
    M: ProjectionMatrix,
    consts: TheoryConstants,
    eps_cap: float = math.inf,
    rtol: float = 1e-9,
) -> DominanceReport:
    """Compare measured errors of an uncontrolled coupled run with the Gronwall bounds."""
    series = error_series(high, low, M)
    distortion = measured_distortion(high, M, eps_cap)
    Mnorm = M.operator_norm()
    gronwall = np.empty(len(series.times))
    minimal = np.empty(len(series.times))
    for n, (t, V, W) in enumerate(zip(series.times, high.V, low.V)):
        pair = uncontrolled_bound(
            float(t), consts, distortion.eps, distortion.delta, Mnorm, float(V), float(W)
        )
        gronwall[n], minimal[n] = pair.gronwall, pair.min_bound
    slack = 1e-12
    total = series.total
    return DominanceReport(
        series=replace(series, theoretical_bound=gronwall, min_bound=minimal),
        distortion=distortion,
        Mnorm=Mnorm,
        gronwall_violations=[
            int(n) for n in np.flatnonzero(total > gronwall * (1.0 + rtol) + slack)
        ],
        min_bound_violations=[
            int(n) for n in np.flatnonzero(series.E_v > minimal * (1.0 + rtol) + slack)
        ],
    )


@dataclass(frozen=True)
class CertificateReport:
    checks: dict[str, bool]
    failures: list[str]
    hypothesis_flags: list[str]
    notes: list[str]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def convergence_certificates(
    run: CoupledRun, consts: TheoryConstants
) -> CertificateReport:
    """Check the convergence guarantees on a coupled run.

    The guarantees hold when tau <= tau0 and the projection satisfies the JL
    hypotheses; failures outside those hypotheses are flagged as such.
    """
    if any(sample.state is None for sample in run.high.samples):
        raise ValueError(
            "certificates need recorded states, run the strategy with store_states=True"
        )
    params = run.high.params
    notes = [ALPHA_NOTE]
    flags: list[str] = []
    if consts.degenerate or not consts.feasible:
        flags.extend(consts.issues)
    if not math.isnan(consts.tau0) and params.tau > consts.tau0:
        flags.append(f"tau = {params.tau:.6g} exceeds tau0 = {consts.tau0:.6g}")
    if not run.projection.family.curve_guarantee:
        flags.append("gaussian projection lacks the curve guarantee")

    checks: dict[str, bool] = {}
    failures: list[str] = []
    switch = run.TS
    if switch is None:
        checks.update(time_bound=False, spread_bound=False, region=False)
        failures.append("the switching threshold was never reached")
        return CertificateReport(checks, failures, flags, notes)

    W0 = float(run.low.V[0])
    time_bound = (2.0 * params.N / params.theta) * (math.sqrt(W0) - 2.0 * consts.Delta)
    time_bound += params.tau
    checks["time_bound"] = switch <= time_bound + 1e-12
    if not checks["time_bound"]:
        failures.append(f"switch time {switch:.6g} exceeds {time_bound:.6g}")

    x_cap = 2.0 * math.sqrt(params.N * consts.Xbar)
    v_cap = 2.0 * math.sqrt(params.N * consts.V0)
    spread_ok = True
    last = round(switch / params.tau)
    for sample in run.high.samples[: last + 1]:
        state = sample.state
        assert state is not None
        x_max = float(pdist(state.x).max()) if state.n_agents > 1 else 0.0
        v_max = float(pdist(state.v).max()) if state.n_agents > 1 else 0.0
        if x_max > x_cap * (1.0 + 1e-12) or v_max > v_cap * (1.0 + 1e-12):
            spread_ok = False
            failures.append(f"pairwise spread bound fails at t={sample.t:.6g}")
            break
    checks["spread_bound"] = spread_ok

    high_margin = run.high.samples[last].margin
    low_margin = run.low.samples[last].margin
    checks["region"] = high_margin <= 0 and low_margin <= 0
    if not checks["region"]:
        failures.append(
            f"not both in the consensus region at {switch:.6g} "
            f"(high margin {high_margin:.6g}, low margin {low_margin:.6g}, W(0)={W0:.6g})"
        )
    return CertificateReport(checks, failures, flags, notes)
