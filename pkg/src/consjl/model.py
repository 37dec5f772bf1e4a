"""
Core types of the Cucker-Smale alignment model.

The interaction kernel is ``a(r) = K / (sigma^2 + r^2)^beta``. States hold the
main states ``x`` and the consensus parameters ``v`` of ``N`` agents as
``(N, dim)`` arrays; agent ``i`` of the formulas is row ``i - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, special
from scipy.spatial.distance import pdist

if TYPE_CHECKING:  # pragma: no cover
    from .jl import ProjectionMatrix

FloatArray = NDArray[np.float64]

GAMMA_RTOL = 1e-10


@dataclass(frozen=True)
class ModelParams:
    """Parameters shared by the high- and the low-dimensional system.

    Args:
        N: Number of agents.
        d: Ambient dimension of the high-dimensional system.
        K: Kernel scale.
        sigma: Kernel offset.
        beta: Kernel decay power.
        theta: Control budget, the per-instant l1(l2) bound.
        tau: Sampling time.
    """

    N: int
    d: int
    K: float = 1.0
    sigma: float = 1.0
    beta: float = 0.6
    theta: float = 5.0
    tau: float = 0.01

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ValueError(f"N must be at least 2, got {self.N}")
        if self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def a0(self) -> float:
        """Kernel value at distance zero."""
        return self.K / self.sigma ** (2 * self.beta)


def _as_agent_array(value: ArrayLike, name: str) -> FloatArray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty (N, dim) array, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FlockState:
    """Positions and consensus parameters of N agents at time ``t``.

    ``vbar_drift`` accumulates (1/N) sum_i int u_i ds, so that the mean
    consensus parameter can be reconstructed as v̄(0) + vbar_drift.
    """

    x: FloatArray
    v: FloatArray
    t: float = 0.0
    vbar_drift: FloatArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        x = _as_agent_array(self.x, "x")
        v = _as_agent_array(self.v, "v")
        if x.shape != v.shape:
            raise ValueError(
                f"x and v must have the same shape, got {x.shape} and {v.shape}"
            )
        if self.t < 0:
            raise ValueError(f"t must be nonnegative, got {self.t}")
        if self.vbar_drift is None:
            drift = np.zeros(x.shape[1])
        else:
            drift = np.array(self.vbar_drift, dtype=np.float64)
            if drift.shape != (x.shape[1],):
                raise ValueError(
                    f"vbar_drift must have shape ({x.shape[1]},), got {drift.shape}"
                )
        drift.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "vbar_drift", drift)

    @property
    def n_agents(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def mean_velocity(self, reconstructed_from: FloatArray | None = None) -> FloatArray:
        """Mean consensus parameter.

        With ``reconstructed_from`` (the mean at time 0) the mean is rebuilt as
        v̄(0) + vbar_drift instead of being observed from ``v``.
        """
        if reconstructed_from is None:
            return self.v.mean(axis=0)
        return np.asarray(reconstructed_from) + self.vbar_drift

    def project(self, M: ProjectionMatrix) -> FlockState:
        """The low-dimensional twin (Mx, Mv) with zero accumulated drift."""
        return FlockState(M.apply(self.x), M.apply(self.v), t=self.t)

    def same_as(self, other: FlockState) -> bool:
        """Bitwise equality of all fields."""
        return (
            self.t == other.t
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.vbar_drift, other.vbar_drift)
        )


@dataclass(frozen=True)
class Moments:
    """Spatial (X) and velocity (V) disagreement of a state."""

    X: float
    V: float


@dataclass(frozen=True, eq=False)
class ControlVector:
    """Per-agent control entries of one sampling interval."""

    entries: FloatArray
    active_index: int | None = None

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f"control entries must be (N, dim), got {entries.shape}")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @classmethod
    def zeros(cls, n_agents: int, dim: int) -> ControlVector:
        return cls(np.zeros((n_agents, dim)))

    @property
    def norms(self) -> FloatArray:
        return np.linalg.norm(self.entries, axis=1)

    @property
    def magnitude(self) -> float:
        """The l1(l2) norm sum_i ||u_i||."""
        return float(self.norms.sum())

    @property
    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.norms))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.entries)


def kernel_a(r: ArrayLike, params: ModelParams) -> FloatArray | float:
    """Interaction kernel ``K / (sigma^2 + r^2)^beta``."""
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0):
        raise ValueError("kernel distance must be nonnegative")
    value = kernel_from_squared(r_arr * r_arr, params)
    return float(value) if value.ndim == 0 else value


def kernel_from_squared(r_sq: FloatArray, params: ModelParams) -> FloatArray:
    """Kernel evaluated on squared distances, skipping the square root."""
    return params.K * (params.sigma**2 + r_sq) ** (-params.beta)


def kernel_derivative(r: ArrayLike, params: ModelParams) -> FloatArray | float:
    """a'(r) = -2 beta K r / (sigma^2 + r^2)^(beta + 1)."""
    r_arr = np.asarray(r, dtype=np.float64)
    value = (
        -2.0
        * params.beta
        * params.K
        * r_arr
        * (params.sigma**2 + r_arr * r_arr) ** (-params.beta - 1.0)
    )
    return float(value) if value.ndim == 0 else value


def lipschitz_constant(params: ModelParams) -> float:
    """Lipschitz constant of the kernel, max_r |a'(r)|.

    The maximum sits at r* = sigma / sqrt(2 beta + 1).
    """
    if params.beta == 0:
        return 0.0
    r_star = params.sigma / math.sqrt(2 * params.beta + 1)
    return abs(float(kernel_derivative(r_star, params)))


def perp_decompose(v: ArrayLike) -> tuple[FloatArray, FloatArray]:
    """Split agent vectors into their mean and the components orthogonal to it."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, dim) array, got {arr.shape}")
    mean = arr.mean(axis=0)
    return mean, arr - mean


def bilinear_form(u: ArrayLike, w: ArrayLike) -> float:
    """B(u, w) = (1/N) sum_i <u_i^perp, w_i^perp>."""
    _, u_perp = perp_decompose(u)
    _, w_perp = perp_decompose(w)
    if u_perp.shape != w_perp.shape:
        raise ValueError(f"shape mismatch: {u_perp.shape} vs {w_perp.shape}")
    return float(np.sum(u_perp * w_perp) / u_perp.shape[0])


def bilinear_form_pairwise(u: ArrayLike, w: ArrayLike) -> float:
    """B(u, w) = 1/(2N^2) sum_{i,j} <u_i - u_j, w_i - w_j>, as a double sum."""
    u_arr = np.asarray(u, dtype=np.float64)
    w_arr = np.asarray(w, dtype=np.float64)
    if u_arr.shape != w_arr.shape:
        raise ValueError(f"shape mismatch: {u_arr.shape} vs {w_arr.shape}")
    n = u_arr.shape[0]
    if u_arr is w_arr or np.array_equal(u_arr, w_arr):
        # pdist only holds i < j, the double sum counts every pair twice
        return float(2.0 * pdist(u_arr, "sqeuclidean").sum() / (2.0 * n * n))
    du = u_arr[:, None, :] - u_arr[None, :, :]
    dw = w_arr[:, None, :] - w_arr[None, :, :]
    return float(np.einsum("ijk,ijk->", du, dw) / (2.0 * n * n))


def moments(state: FlockState) -> Moments:
    """X = B(x, x) and V = B(v, v) of a state (Y and W for a low-dimensional one)."""
    return Moments(X=bilinear_form(state.x, state.x), V=bilinear_form(state.v, state.v))


def _tail_integrand(u: float, s0: float, params: ModelParams, p: float) -> float:
    # s + sigma = (s0 + sigma) * u^(-1/p) maps [s0, inf) onto (0, 1] and turns the
    # algebraic tail into a bounded integrand.
    scale = s0 + params.sigma
    if u <= 0.0:
        return params.K * scale ** (1.0 - 2.0 * params.beta) / p
    log_shift = math.log(scale) - math.log(u) / p
    if log_shift > 300.0:
        log_den = 2.0 * log_shift
    else:
        s = math.exp(log_shift) - params.sigma
        log_den = math.log(params.sigma**2 + s * s)
    log_value = (
        math.log(params.K)
        - params.beta * log_den
        + math.log(scale)
        - math.log(p)
        - (1.0 / p + 1.0) * math.log(u)
    )
    return math.exp(log_value)


def gamma_functional(X0: float, params: ModelParams, method: str = "quad") -> float:
    """gamma(X0) = int_{sqrt(X0)}^inf a(sqrt(2N) r) dr.

    Returns ``math.inf`` for beta <= 1/2, where the integral diverges and the
    consensus region is the whole state space.

    Args:
        X0: Spatial disagreement, nonnegative.
        params: Model parameters.
        method: ``"quad"`` for adaptive Gauss-Kronrod quadrature, ``"beta"`` for
            the closed form through the regularized incomplete beta function.
    """
    if X0 < 0:
        raise ValueError(f"X0 must be nonnegative, got {X0}")
    if params.beta <= 0.5:
        return math.inf
    root_2n = math.sqrt(2.0 * params.N)
    s0 = math.sqrt(2.0 * params.N * X0)
    p = 2.0 * params.beta - 1.0
    if method == "quad":
        value, _ = integrate.quad(
            _tail_integrand,
            0.0,
            1.0,
            args=(s0, params, p),
            epsabs=0.0,
            epsrel=GAMMA_RTOL,
            limit=200,
        )
    elif method == "beta":
        a, b = params.beta - 0.5, 0.5
        w0 = params.sigma**2 / (params.sigma**2 + s0 * s0)
        value = (
            params.K
            * params.sigma ** (1.0 - 2.0 * params.beta)
            / 2.0
            * special.beta(a, b)
            * special.betainc(a, b, w0)
        )
    else:
        raise ValueError(f"unknown gamma method {method!r}, expected 'quad' or 'beta'")
    return float(value) / root_2n


def gamma_squared(X0: float, params: ModelParams) -> float:
    gamma = gamma_functional(X0, params)
    return math.inf if math.isinf(gamma) else gamma * gamma


def margin_of(m: Moments, params: ModelParams) -> float:
    """V - gamma(X)^2 for already computed moments; -inf when gamma is infinite."""
    gamma_sq = gamma_squared(m.X, params)
    if math.isinf(gamma_sq):
        return -math.inf
    return m.V - gamma_sq


def consensus_margin(state: FlockState, params: ModelParams) -> float:
    """V(t) - gamma(X(t))^2; the state is in the consensus region iff it is <= 0."""
    return margin_of(moments(state), params)
